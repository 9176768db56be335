//! Append-only JSON-lines run log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::GridPoint;
use crate::error::{Error, Result};

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Config {
        config: serde_json::Value,
        seeds: Vec<u64>,
        version: String,
    },
    Epoch {
        seed: u64,
        /// Where in the experiment this epoch ran, e.g. `magnitude/round3` or `task2`.
        scope: String,
        epoch: usize,
        train_loss: f64,
        train_accuracy: f64,
        val_accuracy: Option<f64>,
        test_accuracy: Option<f64>,
    },
    Task {
        seed: u64,
        task: usize,
        latest: f64,
        average: f64,
        accuracies: Vec<f64>,
    },
    Round {
        seed: u64,
        arm: String,
        round: usize,
        density: f64,
        layer_density: Vec<f64>,
        test_accuracy: f64,
    },
    Noise {
        seed: u64,
        model: String,
        p: f64,
        accuracy: f64,
    },
    Grid {
        index: usize,
        point: GridPoint,
        score: Option<f64>,
        error: Option<String>,
    },
    Summary {
        seed: u64,
        name: String,
        value: f64,
    },
    End {
        artifact_hash: String,
        wall_clock_s: f64,
    },
}

impl Event {
    fn is_metric(&self) -> bool {
        !matches!(self, Event::End { .. })
    }
}

/// Events plus an optional file sink that is flushed after every event.
#[derive(Debug)]
pub struct RunRecord {
    events: Vec<Event>,
    sink: Option<File>,
    path: Option<PathBuf>,
    started: Instant,
}

impl RunRecord {
    pub fn in_memory(config: serde_json::Value, seeds: &[u64]) -> Self {
        let mut r = RunRecord {
            events: Vec::new(),
            sink: None,
            path: None,
            started: Instant::now(),
        };
        r.events.push(config_event(config, seeds));
        r
    }

    /// Start a fresh log at `path`, truncating any existing file.
    pub fn create(path: impl AsRef<Path>, config: serde_json::Value, seeds: &[u64]) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut r = RunRecord {
            events: Vec::new(),
            sink: Some(File::create(path)?),
            path: Some(path.to_path_buf()),
            started: Instant::now(),
        };
        r.push(config_event(config, seeds))?;
        Ok(r)
    }

    /// Reopen an existing log for appending, keeping its events; creates it if absent.
    pub fn resume(path: impl AsRef<Path>, config: serde_json::Value, seeds: &[u64]) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Self::create(path, config, seeds);
        }
        let mut events = read_events(path)?;
        if let Some(Event::End { .. }) = events.last() {
            events.pop();
        }
        match events.first() {
            Some(Event::Config { config: c, .. }) if *c == config => {}
            _ => return Err(Error::config(format!("{} was written for a different config", path.display()))),
        }
        let sink = OpenOptions::new().append(true).open(path)?;
        Ok(RunRecord {
            events,
            sink: Some(sink),
            path: Some(path.to_path_buf()),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn push(&mut self, event: Event) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn artifact_hash(&self) -> String {
        artifact_hash(&self.events)
    }

    /// Append the closing event and return the full event list.
    pub fn finish(mut self) -> Result<Vec<Event>> {
        let hash = self.artifact_hash();
        let wall = self.started.elapsed().as_secs_f64();
        self.push(Event::End {
            artifact_hash: hash,
            wall_clock_s: wall,
        })?;
        Ok(self.events)
    }
}

fn config_event(config: serde_json::Value, seeds: &[u64]) -> Event {
    Event::Config {
        config,
        seeds: seeds.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// SHA-256 over the canonical JSON of every non-closing event.
pub fn artifact_hash(events: &[Event]) -> String {
    let mut h = Sha256::new();
    for e in events.iter().filter(|e| e.is_metric()) {
        h.update(serde_json::to_vec(e).expect("events always serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut events = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            // a torn final line from a crash is dropped
            match serde_json::from_str(&line) {
                Ok(e) => events.push(e),
                Err(e) if e.is_eof() => break,
                Err(e) => {
                    return Err(Error::CorruptFile {
                        path: path.display().to_string(),
                        offset,
                        msg: e.to_string(),
                    })
                }
            }
        }
        offset += line.len() as u64 + 1;
    }
    Ok(events)
}

/// The config and seeds a log was written for.
pub fn recorded_config(events: &[Event]) -> Result<(serde_json::Value, Vec<u64>)> {
    match events.first() {
        Some(Event::Config { config, seeds, .. }) => Ok((config.clone(), seeds.clone())),
        _ => Err(Error::data("run log does not start with a config event")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_log_round_trips_and_hash_ignores_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let cfg = serde_json::json!({"a": 1});
        let mut r = RunRecord::create(&path, cfg.clone(), &[3]).unwrap();
        // values whose shortest decimal form needs a correctly rounded parser
        let mut x = 0.1f64;
        for i in 0..2000 {
            x = (x * 1.618_033_988_749_895 + 1.0 / 3.0).fract() * 10f64.powi(i % 7 - 3);
            r.push(Event::Summary { seed: 3, name: "acc".into(), value: x }).unwrap();
        }
        let hash = r.artifact_hash();
        let events = r.finish().unwrap();
        let back = read_events(&path).unwrap();
        assert_eq!(back, events);
        assert_eq!(artifact_hash(&back), hash);
        assert_eq!(recorded_config(&back).unwrap(), (cfg, vec![3]));
    }

    #[test]
    fn resume_keeps_events_and_checks_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.jsonl");
        let cfg = serde_json::json!({"grid": true});
        let mut r = RunRecord::create(&path, cfg.clone(), &[0]).unwrap();
        r.push(Event::Summary { seed: 0, name: "x".into(), value: 1.0 }).unwrap();
        drop(r);
        let r = RunRecord::resume(&path, cfg, &[0]).unwrap();
        assert_eq!(r.events().len(), 2);
        assert!(RunRecord::resume(&path, serde_json::json!({}), &[0]).is_err());
    }

    #[test]
    fn torn_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let r = RunRecord::create(&path, serde_json::json!(null), &[]).unwrap();
        drop(r);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"summ").unwrap();
        assert_eq!(read_events(&path).unwrap().len(), 1);
    }
}

//! Cartesian hyperparameter search on a bounded worker pool.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::record::{Event, RunRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub conv_activation_density: Vec<f64>,
    pub ff_activation_density: Vec<f64>,
    pub ff_weight_density: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub conv_activation_density: f64,
    pub ff_activation_density: f64,
    pub ff_weight_density: f64,
}

impl GridSpec {
    /// 27 points over learning rate, batch size and weight decay, dense everywhere.
    pub fn base_cnn() -> Self {
        GridSpec {
            lr: vec![1e-5, 1e-4, 1e-3],
            batch_size: vec![32, 64, 128],
            weight_decay: vec![0.0, 1e-5, 1e-4],
            conv_activation_density: vec![1.0],
            ff_activation_density: vec![1.0],
            ff_weight_density: vec![1.0],
        }
    }

    /// 162 points; the same axes serve the sparse and the dendritic networks.
    pub fn sparse() -> Self {
        GridSpec {
            lr: vec![1e-5, 1e-4, 1e-3],
            batch_size: vec![32, 64, 128],
            weight_decay: vec![0.0],
            conv_activation_density: vec![0.1, 0.2, 0.3],
            ff_activation_density: vec![0.1, 0.3],
            ff_weight_density: vec![0.3, 0.5, 0.7],
        }
    }

    pub fn size(&self) -> usize {
        self.lr.len()
            * self.batch_size.len()
            * self.weight_decay.len()
            * self.conv_activation_density.len()
            * self.ff_activation_density.len()
            * self.ff_weight_density.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::config("every grid axis needs at least one value"));
        }
        Ok(())
    }

    /// Points in row-major order over the axes as declared (last axis fastest).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.size());
        for &lr in &self.lr {
            for &batch_size in &self.batch_size {
                for &weight_decay in &self.weight_decay {
                    for &conv_activation_density in &self.conv_activation_density {
                        for &ff_activation_density in &self.ff_activation_density {
                            for &ff_weight_density in &self.ff_weight_density {
                                out.push(GridPoint {
                                    lr,
                                    batch_size,
                                    weight_decay,
                                    conv_activation_density,
                                    ff_activation_density,
                                    ff_weight_density,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Text comparing two grid sizes with a claimed multiplier.
pub fn multiplier_report(base: &GridSpec, other: &GridSpec, seeds_per_point: usize, claimed: f64) -> String {
    let ratio = other.size() as f64 / base.size() as f64;
    let verdict = if (ratio - claimed).abs() < 1e-9 { "matches" } else { "does not match" };
    format!(
        "grid sizes: base {} points, other {} points, {} seed(s) each; ratio {ratio}x {verdict} the claimed {claimed}x",
        base.size(),
        other.size(),
        seeds_per_point
    )
}

/// Independent seed for each point, fixed by the master seed and point index.
pub fn point_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub point: GridPoint,
    pub score: Option<f64>,
    /// Set when the point failed and was quarantined.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    /// One row per point, ordered by index.
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the highest score (lowest index on ties).
    pub best: Option<usize>,
    /// Points taken from an earlier log instead of being re-run.
    pub resumed: usize,
}

impl GridOutcome {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|i| &self.rows[i])
    }

    pub fn quarantined(&self) -> impl Iterator<Item = &GridRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

fn best_index(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(s) = r.score {
            if best.is_none_or(|b| s > rows[b].score.unwrap()) {
                best = Some(i);
            }
        }
    }
    best
}

/// Run `eval(point, point_seed)` over the grid with `workers` threads.
///
/// Rows already present as grid events in `ledger` are reused. A point that
/// errors or panics is recorded with its message and the search continues.
/// The result does not depend on `workers` or completion order.
pub fn grid_search<F>(
    spec: &GridSpec,
    master_seed: u64,
    workers: usize,
    ledger: Option<&mut RunRecord>,
    eval: F,
) -> Result<GridOutcome>
where
    F: Fn(&GridPoint, u64) -> Result<f64> + Sync,
{
    spec.validate()?;
    let points = spec.points();
    let mut done: BTreeMap<usize, GridRow> = BTreeMap::new();
    if let Some(ledger) = &ledger {
        for e in ledger.events() {
            if let Event::Grid { index, point, score, error } = e {
                if *index < points.len() && points[*index] == *point {
                    done.insert(*index, GridRow { index: *index, point: *point, score: *score, error: error.clone() });
                }
            }
        }
    }
    let resumed = done.len();
    let pending: Vec<usize> = (0..points.len()).filter(|i| !done.contains_key(i)).collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(done);
    let ledger = Mutex::new(ledger);
    let sink_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(pending.len().max(1)) {
            scope.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&index) = pending.get(slot) else { break };
                let point = points[index];
                let outcome = catch_unwind(AssertUnwindSafe(|| eval(&point, point_seed(master_seed, index))));
                let (score, error) = match outcome {
                    Ok(Ok(s)) if s.is_finite() => (Some(s), None),
                    Ok(Ok(s)) => (None, Some(format!("non-finite score {s}"))),
                    Ok(Err(e)) => (None, Some(e.to_string())),
                    Err(panic) => (
                        None,
                        Some(
                            panic
                                .downcast_ref::<String>()
                                .cloned()
                                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                                .unwrap_or_else(|| "panic".into()),
                        ),
                    ),
                };
                let row = GridRow { index, point, score, error };
                if let Some(l) = ledger.lock().unwrap().as_mut() {
                    let event = Event::Grid { index, point, score: row.score, error: row.error.clone() };
                    if let Err(e) = l.push(event) {
                        sink_error.lock().unwrap().get_or_insert(e);
                    }
                }
                results.lock().unwrap().insert(index, row);
            });
        }
    });
    if let Some(e) = sink_error.into_inner().unwrap() {
        return Err(e);
    }
    let rows: Vec<GridRow> = results.into_inner().unwrap().into_values().collect();
    Ok(GridOutcome { best: best_index(&rows), rows, resumed })
}

pub fn to_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(
        "index,lr,batch_size,weight_decay,conv_activation_density,ff_activation_density,ff_weight_density,score,error\n",
    );
    for r in rows {
        let p = &r.point;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.index,
            p.lr,
            p.batch_size,
            p.weight_decay,
            p.conv_activation_density,
            p.ff_activation_density,
            p.ff_weight_density,
            r.score.map(|s| s.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singleton() -> GridSpec {
        GridSpec {
            lr: vec![1e-3],
            batch_size: vec![32],
            weight_decay: vec![0.0],
            conv_activation_density: vec![1.0],
            ff_activation_density: vec![1.0],
            ff_weight_density: vec![1.0],
        }
    }

    #[test]
    fn preset_sizes() {
        assert_eq!(GridSpec::base_cnn().size(), 27);
        assert_eq!(GridSpec::sparse().size(), 162);
        assert_eq!(GridSpec::sparse().points().len(), 162);
        let report = multiplier_report(&GridSpec::base_cnn(), &GridSpec::sparse(), 1, 12.0);
        assert!(report.contains("6x does not match the claimed 12x"), "{report}");
    }

    #[test]
    fn singleton_runs_once() {
        let calls = AtomicUsize::new(0);
        let out = grid_search(&singleton(), 0, 4, None, |_, _| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.best, Some(0));
    }

    #[test]
    fn failures_quarantined_and_worker_count_irrelevant() {
        let spec = GridSpec::base_cnn();
        let score = |p: &GridPoint, seed: u64| -> Result<f64> {
            if p.batch_size == 64 && p.weight_decay == 0.0 {
                return Err(Error::config("boom"));
            }
            if p.batch_size == 128 && p.weight_decay == 0.0 {
                panic!("kaboom");
            }
            Ok(p.lr * 1e3 + (seed % 7) as f64)
        };
        let one = grid_search(&spec, 11, 1, None, score).unwrap();
        let many = grid_search(&spec, 11, 3, None, score).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.rows.len(), 27);
        assert_eq!(one.quarantined().count(), 6);
        let brute = one
            .rows
            .iter()
            .filter_map(|r| r.score.map(|s| (r.index, s)))
            .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((i, s)),
            });
        assert_eq!(one.best_row().map(|r| r.index), brute.map(|b| b.0));
    }

    #[test]
    fn resume_skips_completed_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.jsonl");
        let spec = GridSpec::base_cnn();
        let cfg = serde_json::to_value(&spec).unwrap();
        {
            let mut ledger = RunRecord::create(&path, cfg.clone(), &[5]).unwrap();
            let kill_after = AtomicUsize::new(0);
            let _ = grid_search(&spec, 5, 1, Some(&mut ledger), |p, _| {
                if kill_after.fetch_add(1, Ordering::SeqCst) >= 10 {
                    return Err(Error::config("interrupted"));
                }
                Ok(p.lr)
            });
        }
        // drop the failed points to mimic a killed process
        let kept: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("interrupted"))
            .map(String::from)
            .collect();
        std::fs::write(&path, kept.join("\n") + "\n").unwrap();
        let mut ledger = RunRecord::resume(&path, cfg, &[5]).unwrap();
        let calls = AtomicUsize::new(0);
        let out = grid_search(&spec, 5, 2, Some(&mut ledger), |p, _| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(p.lr)
        })
        .unwrap();
        assert_eq!(out.resumed, 10);
        assert_eq!(calls.load(Ordering::SeqCst), 17);
        assert_eq!(out.rows.len(), 27);
        assert!(out.rows.iter().all(|r| r.score.is_some()));
    }
}

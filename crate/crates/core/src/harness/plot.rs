//! Whitespace-delimited series files for gnuplot plus a JSON manifest.
//!
//! Each figure is one `.dat` file. Series are separated by two blank lines so
//! gnuplot's `index` selects them, and each starts with a `# series: <label>` line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::Event;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, usize)>,
}

pub fn render_dat(fig: &Figure) -> String {
    let mut out = format!("# {} vs {}\n", fig.y_label, fig.x_label);
    for (i, s) in fig.series.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("# series: {}\n", s.label));
        for (x, y) in &s.points {
            out.push_str(&format!("{x:?} {y:?}\n"));
        }
    }
    out
}

pub fn parse_dat(text: &str) -> Result<Vec<Series>> {
    let mut series: Vec<Series> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(label) = line.strip_prefix("# series: ") {
            series.push(Series { label: label.to_string(), points: Vec::new() });
        } else if line.is_empty() || line.starts_with('#') {
            continue;
        } else {
            let bad = || Error::data(format!("plot data line {}: {line:?}", n + 1));
            let mut it = line.split_whitespace();
            let x: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let y: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            series.last_mut().ok_or_else(bad)?.points.push((x, y));
        }
    }
    Ok(series)
}

/// Write one `.dat` per figure and `manifest.json` into `dir`.
pub fn emit_plotdata(dir: impl AsRef<Path>, figures: &[Figure]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut manifest = Vec::new();
    for fig in figures {
        let file = format!("{}.dat", fig.name);
        let path = dir.join(&file);
        std::fs::write(&path, render_dat(fig))?;
        written.push(path);
        manifest.push(ManifestEntry {
            name: fig.name.clone(),
            file,
            x_label: fig.x_label.clone(),
            y_label: fig.y_label.clone(),
            series: fig.series.iter().map(|s| (s.label.clone(), s.points.len())).collect(),
        });
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    written.push(path);
    Ok(written)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Figures derivable from a run log, averaging over seeds:
/// pruning curves (one series per arm), noise curves (one per model), and
/// latest/average continual accuracy.
pub fn figures_from_events(events: &[Event]) -> Vec<Figure> {
    let mut rounds: BTreeMap<String, BTreeMap<usize, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut noise: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    let mut tasks: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in events {
        match e {
            Event::Round { arm, round, density, test_accuracy, .. } => {
                let slot = rounds.entry(arm.clone()).or_default().entry(*round).or_insert((*density, Vec::new()));
                slot.1.push(*test_accuracy);
            }
            Event::Noise { model, p, accuracy, .. } => {
                let curve = noise.entry(model.clone()).or_default();
                match curve.iter_mut().find(|(q, _)| q == p) {
                    Some((_, acc)) => acc.push(*accuracy),
                    None => curve.push((*p, vec![*accuracy])),
                }
            }
            Event::Task { task, latest, average, .. } => {
                let slot = tasks.entry(*task).or_default();
                slot.0.push(*latest);
                slot.1.push(*average);
            }
            _ => {}
        }
    }
    let mut figures = Vec::new();
    if !rounds.is_empty() {
        figures.push(Figure {
            name: "imp_accuracy".into(),
            x_label: "percent of weights remaining".into(),
            y_label: "test accuracy (%)".into(),
            series: rounds
                .into_iter()
                .map(|(arm, by_round)| Series {
                    label: arm,
                    points: by_round.into_values().map(|(d, acc)| (100.0 * d, mean(&acc))).collect(),
                })
                .collect(),
        });
    }
    if !noise.is_empty() {
        figures.push(Figure {
            name: "noise_accuracy".into(),
            x_label: "noise probability".into(),
            y_label: "test accuracy (%)".into(),
            series: noise
                .into_iter()
                .map(|(model, curve)| Series {
                    label: model,
                    points: curve.into_iter().map(|(p, acc)| (p, mean(&acc))).collect(),
                })
                .collect(),
        });
    }
    if !tasks.is_empty() {
        let (latest, average): (Vec<_>, Vec<_>) = tasks
            .into_iter()
            .map(|(t, (l, a))| (((t + 1) as f64, mean(&l)), ((t + 1) as f64, mean(&a))))
            .unzip();
        figures.push(Figure {
            name: "continual_accuracy".into(),
            x_label: "tasks trained".into(),
            y_label: "test accuracy (%)".into(),
            series: vec![
                Series { label: "latest".into(), points: latest },
                Series { label: "average".into(), points: average },
            ],
        });
    }
    figures
}

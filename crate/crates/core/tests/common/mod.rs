#![allow(dead_code)]

pub mod gradcheck;

/// Sort-based kWTA: stable sort by descending value, keep the first `k` positions.
pub fn kwta_oracle(row: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut out = vec![0.0; row.len()];
    for &i in &order[..k] {
        out[i] = row[i];
    }
    out
}

//! Brute-force f64 recomputations and small fixtures shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use kiop_tape::Tensor;

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, k) = t.dims2().unwrap();
    (0..n).map(|i| t.data()[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Batch-mean KL(softmax(p) || softmax(q)).
pub fn kl(p: &Tensor, q: &Tensor) -> f64 {
    let (p, q) = (rows(p), rows(q));
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let (pa, qb) = (softmax(a), softmax(b));
        for (x, y) in pa.iter().zip(&qb) {
            if *x > 0.0 {
                total += x * (x / y).ln();
            }
        }
    }
    total / p.len() as f64
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> f64 {
    let r = rows(logits);
    r.iter().zip(targets).map(|(row, &t)| -softmax(row)[t].ln()).sum::<f64>() / r.len() as f64
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (normalize(a), normalize(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// InfoNCE from raw (unnormalized) embeddings: anchor m against its own
/// positive, the other positives and every bank entry.
pub fn contrastive(anchors: &Tensor, positives: &Tensor, bank: Option<&Tensor>, tau: f64) -> f64 {
    let a = rows(anchors);
    let mut keys = rows(positives);
    if let Some(b) = bank {
        keys.extend(rows(b));
    }
    let mut total = 0.0;
    for (m, anchor) in a.iter().enumerate() {
        let pos = (cosine(anchor, &keys[m]) / tau).exp();
        let all: f64 = keys.iter().map(|k| (cosine(anchor, k) / tau).exp()).sum();
        total += -(pos / all).ln();
    }
    total / a.len() as f64
}

/// Per-channel mean and biased variance of a `[n, c, h, w]` batch.
pub fn channel_moments(x: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = x.dims4().unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| {
                    let start = (b * c + ch) * h * w;
                    x.data()[start..start + h * w].iter().map(|&v| v as f64).collect::<Vec<_>>()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect()
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

pub fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor {
    Tensor::new([rows, cols], v.to_vec()).unwrap()
}

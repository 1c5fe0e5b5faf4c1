//! Brute-force oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use inpformer::config::RunConfig;
use inpformer::dataset::{ingest_dataset, DatasetIndex};
use inpformer::synthdata::{generate, SynthSpec};

/// Pairwise AUROC, ties counting one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn confusion_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let (mut tp, mut fp) = (0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= t {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

/// Step-interpolated AP from a full recount at every distinct threshold.
pub fn ap_exhaustive(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds_desc(scores) {
        let (tp, fp) = confusion_at(scores, labels, t);
        let recall = tp / pos;
        ap += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    ap
}

pub fn f1_exhaustive(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    thresholds_desc(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp) = confusion_at(scores, labels, t);
            let (p, r) = (tp / (tp + fp), tp / pos);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .fold(0.0, f64::max)
}

/// 8-connected regions by breadth-first search, as lists of pixel indices.
pub fn regions(bits: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(region);
    }
    out
}

/// AUPRO by recomputing FPR and mean region overlap from scratch at every
/// distinct threshold, then trapezoids up to `limit` (interpolated there).
pub fn aupro_exhaustive(maps: &[(usize, usize, Vec<f64>)], masks: &[Vec<bool>], limit: f64) -> f64 {
    let mut all_regions = Vec::new();
    let mut negatives = 0.0;
    for (k, (h, w, _)) in maps.iter().enumerate() {
        for r in regions(&masks[k], *h, *w) {
            all_regions.push((k, r));
        }
        negatives += masks[k].iter().filter(|&&b| !b).count() as f64;
    }
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.2.iter().copied()).collect();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds_desc(&scores) {
        let mut fp = 0.0;
        for (k, (_, _, v)) in maps.iter().enumerate() {
            fp += v.iter().zip(&masks[k]).filter(|(&s, &m)| !m && s >= t).count() as f64;
        }
        let overlap: f64 = all_regions
            .iter()
            .map(|(k, r)| r.iter().filter(|&&p| maps[*k].2[p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / all_regions.len() as f64;
        curve.push((fp / negatives, overlap));
    }
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// Central finite difference of `f` at every entry of `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// A generated dataset at `dir`, ingested.
pub fn synth_index(dir: &Path, spec: &SynthSpec) -> DatasetIndex {
    generate(dir, spec).unwrap();
    ingest_dataset(dir).unwrap()
}

/// One small category at 28 px with 8 train, 2 good and 2 defective tests.
pub fn tiny_index(dir: &Path) -> DatasetIndex {
    let spec = SynthSpec { size: 28, train: 8, test_good: 2, test_defect: 2, categories: vec!["tiles".into()], ..SynthSpec::default() };
    synth_index(dir, &spec)
}

/// Desk settings shrunk to 28 px inputs and batch 4.
pub fn tiny_config(steps: usize) -> RunConfig {
    let mut c = RunConfig::desk();
    c.resize = 28;
    c.crop = 28;
    c.batch_size = 4;
    c.steps = Some(steps);
    c.warmup_steps = 0;
    c
}

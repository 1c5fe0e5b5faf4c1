//! Image- and pixel-level detection metrics: AUROC, average precision,
//! F1-max, and the per-region-overlap curve area (AUPRO).
//!
//! Every threshold sweep is exact over the distinct score values unless a
//! bin count is requested.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::scoring::AnomalyMap;

fn counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Cumulative `(tp, fp)` after each block of tied scores, highest first.
fn tie_blocks(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let idx = order_desc(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney with mid-ranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs positive and negative samples"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Step-interpolated area under precision-recall:
/// `sum_k (R_k - R_{k-1}) * P_k` over distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive sample"));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in tie_blocks(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Maximum F1 over all thresholds.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("F1 needs a positive sample"));
    }
    Ok(tie_blocks(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (tp + fp + pos) as f64)
        .fold(0.0, f64::max))
}

/// 8-connected component labels; `0` is background, regions count from 1.
pub fn connected_components(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits()[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Maps scores onto `bins` evenly spaced levels between their min and max.
pub fn quantize(scores: &[f64], bins: usize) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || bins < 2 {
        return scores.to_vec();
    }
    let step = (hi - lo) / (bins - 1) as f64;
    scores.iter().map(|s| ((s - lo) / step).floor().min((bins - 1) as f64)).collect()
}

/// Area under the per-region-overlap curve for false-positive rates in
/// `[0, fpr_limit]`, normalized by `fpr_limit`.
///
/// A pixel is predicted anomalous when its score is at or above the
/// threshold. The overlap at a threshold is the mean over all ground-truth
/// regions (8-connected, across every map) of the fraction of that region
/// predicted anomalous; the curve starts at the origin and is integrated
/// with the trapezoid rule, interpolating at `fpr_limit`.
pub fn aupro(maps: &[AnomalyMap], masks: &[Mask], fpr_limit: f64, bins: Option<usize>) -> Result<f64> {
    assert_eq!(maps.len(), masks.len());
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let mut scores = Vec::new();
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if (map.height(), map.width()) != (mask.height(), mask.width()) {
            return Err(Error::Shape("anomaly map and mask differ in size".into()));
        }
        let (labels, n) = connected_components(mask);
        let offset = sizes.len() - 1;
        sizes.extend(std::iter::repeat_n(0, n));
        for (&s, &l) in map.values().iter().zip(&labels) {
            scores.push(s);
            let r = if l == 0 { 0 } else { l + offset };
            sizes[r] += 1;
            region.push(r);
        }
    }
    let regions = sizes.len() - 1;
    if regions == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region"));
    }
    let negatives = sizes[0];
    if negatives == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs normal pixels"));
    }
    if let Some(b) = bins {
        scores = quantize(&scores, b);
    }
    let idx = order_desc(&scores);
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap) = (0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            let r = region[idx[i]];
            if r == 0 {
                fp += 1;
            } else {
                overlap += 1.0 / sizes[r] as f64;
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, overlap / regions as f64));
    }
    Ok(integrate_to(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoid area under a curve with nondecreasing x, up to `limit`.
pub fn integrate_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub fpr_limit: f64,
    /// Quantize pixel scores to this many levels before F1-max and AUPRO.
    pub bins: Option<usize>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { fpr_limit: 0.3, bins: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1_max: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub pixel_f1_max: f64,
    pub aupro: f64,
    pub images: usize,
    pub anomalous_images: usize,
    pub pixels: usize,
}

impl MetricReport {
    /// Computes the seven metrics for one evaluation set.
    pub fn compute(
        image_scores: &[f64],
        image_labels: &[bool],
        maps: &[AnomalyMap],
        masks: &[Mask],
        opts: &MetricOptions,
    ) -> Result<Self> {
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        for (m, k) in maps.iter().zip(masks) {
            pixel_scores.extend_from_slice(m.values());
            pixel_labels.extend_from_slice(k.bits());
        }
        let binned = match opts.bins {
            Some(b) => quantize(&pixel_scores, b),
            None => pixel_scores.clone(),
        };
        Ok(Self {
            image_auroc: auroc(image_scores, image_labels)?,
            image_ap: average_precision(image_scores, image_labels)?,
            image_f1_max: f1_max(image_scores, image_labels)?,
            pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
            pixel_ap: average_precision(&pixel_scores, &pixel_labels)?,
            pixel_f1_max: f1_max(&binned, &pixel_labels)?,
            aupro: aupro(maps, masks, opts.fpr_limit, opts.bins)?,
            images: image_scores.len(),
            anomalous_images: image_labels.iter().filter(|&&l| l).count(),
            pixels: pixel_scores.len(),
        })
    }

    /// Mean of the seven metrics.
    pub fn mean_metric(&self) -> f64 {
        self.values().iter().map(|(_, v)| v).sum::<f64>() / 7.0
    }

    pub fn values(&self) -> [(&'static str, f64); 7] {
        [
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1_max", self.image_f1_max),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_ap", self.pixel_ap),
            ("pixel_f1_max", self.pixel_f1_max),
            ("aupro", self.aupro),
        ]
    }

    /// Element-wise mean of several reports (counts are summed).
    pub fn average(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            image_auroc: mean(|r| r.image_auroc),
            image_ap: mean(|r| r.image_ap),
            image_f1_max: mean(|r| r.image_f1_max),
            pixel_auroc: mean(|r| r.pixel_auroc),
            pixel_ap: mean(|r| r.pixel_ap),
            pixel_f1_max: mean(|r| r.pixel_f1_max),
            aupro: mean(|r| r.aupro),
            images: reports.iter().map(|r| r.images).sum(),
            anomalous_images: reports.iter().map(|r| r.anomalous_images).sum(),
            pixels: reports.iter().map(|r| r.pixels).sum(),
        }
    }
}

/// Flat `key = value` text record of named reports, keys prefixed with the
/// report name (`bottle.image_auroc = 0.98`).
pub fn format_report(named: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    for (name, r) in named {
        for (k, v) in r.values() {
            let _ = writeln!(out, "{name}.{k} = {v:?}");
        }
        let _ = writeln!(out, "{name}.mean = {:?}", r.mean_metric());
        let _ = writeln!(out, "{name}.images = {}", r.images);
        let _ = writeln!(out, "{name}.anomalous_images = {}", r.anomalous_images);
        let _ = writeln!(out, "{name}.pixels = {}", r.pixels);
    }
    out
}

/// Parses a record written by [`format_report`].
pub fn parse_report(text: &str) -> Result<BTreeMap<String, f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad report line `{l}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value in `{l}`")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Resolution;

    #[test]
    fn separated_scores_are_perfect() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(average_precision(&s, &l).unwrap(), 1.0);
        assert_eq!(f1_max(&s, &l).unwrap(), 1.0);
    }

    #[test]
    fn inverted_scores_give_zero_auroc() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_labels_error() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(average_precision(&[0.1], &[false]).is_err());
        assert!(f1_max(&[0.1], &[false]).is_err());
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn components_use_8_connectivity() {
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(3, 3, true);
        let (_, n) = connected_components(&m);
        assert_eq!(n, 2);
    }

    #[test]
    fn aupro_perfect_and_uniform() {
        let mut m = Mask::empty(4, 4);
        m.set(1, 1, true);
        m.set(1, 2, true);
        let perfect = AnomalyMap::new(4, 4, m.as_f64(), Resolution::Image);
        assert!((aupro(&[perfect], &[m.clone()], 0.3, None).unwrap() - 1.0).abs() < 1e-12);
        let flat = AnomalyMap::new(4, 4, vec![0.4; 16], Resolution::Image);
        // single jump from (0,0) to (1,1): area 0.5*0.3*0.3 / 0.3
        assert!((aupro(&[flat], &[m], 0.3, None).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn aupro_without_regions_is_undefined() {
        let flat = AnomalyMap::new(2, 2, vec![0.4; 4], Resolution::Image);
        assert!(aupro(&[flat], &[Mask::empty(2, 2)], 0.3, None).is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricReport { image_auroc: 0.75, pixel_ap: 1.0 / 3.0, images: 4, ..Default::default() };
        let text = format_report(&[("pooled".into(), r.clone())]);
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed["pooled.image_auroc"], 0.75);
        assert_eq!(parsed["pooled.pixel_ap"], 1.0 / 3.0);
        assert_eq!(parsed["pooled.images"], 4.0);
    }
}

//! Aggregates over certification records, log-probability gaps, the
//! easy/hard split by certified radius, and runtime summaries.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::certify::CertificationRecord;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, log_softmax};
use crate::model::{argmax, CostReport, MultiHeadNetwork};
use crate::rng;

fn non_empty(records: &[CertificationRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::input("no certification records"))
    } else {
        Ok(())
    }
}

/// Mean of `radius * [correct]` over all records.
pub fn acr(records: &[CertificationRecord]) -> Result<f64> {
    non_empty(records)?;
    let total: f64 = records.iter().filter(|r| r.correct).map(|r| r.radius).sum();
    Ok(total / records.len() as f64)
}

/// Fraction of records that are correct with radius at least `radius`.
pub fn certified_accuracy(records: &[CertificationRecord], radius: f64) -> Result<f64> {
    non_empty(records)?;
    if !(radius >= 0.0) {
        return Err(Error::input(format!("radius {radius} must be non-negative")));
    }
    let hits = records.iter().filter(|r| r.correct && r.radius >= radius).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedCurve {
    pub radii: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub acr: f64,
}

/// `0, step, 2 * step, ...` up to and including `max`.
pub fn radius_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

pub fn certified_curve(records: &[CertificationRecord], grid: &[f64]) -> Result<CertifiedCurve> {
    let accuracy = grid
        .iter()
        .map(|&r| certified_accuracy(records, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CertifiedCurve {
        radii: grid.to_vec(),
        accuracy,
        acr: acr(records)?,
    })
}

/// Trapezoid integral of the certified-accuracy curve over `points` equally
/// spaced radii from 0 to just past the largest radius.
pub fn curve_integral(records: &[CertificationRecord], points: usize) -> Result<f64> {
    non_empty(records)?;
    let max = records.iter().map(|r| r.radius).fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    let points = points.max(2);
    let h = max * 1.001 / (points - 1) as f64;
    let values = (0..points)
        .map(|i| certified_accuracy(records, i as f64 * h))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum())
}

pub fn write_curve_csv(curve: &CertifiedCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from("radius,accuracy\n");
    for (r, a) in curve.radii.iter().zip(&curve.accuracy) {
        writeln!(text, "{r:.2},{a:.4}").unwrap();
    }
    write_text(path.as_ref(), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `log p_y - max_{c != y} log p_c` for the softmax of `logits`.
pub fn log_prob_gap(logits: &[f64], label: usize) -> f64 {
    let lp = log_softmax(logits);
    let other = lp
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    lp[label] - other
}

fn noisy_copies(x: &[f64], sigma: f64, draws: usize, r: &mut rng::Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(draws * x.len());
    for _ in 0..draws {
        out.extend(x.iter().map(|v| v + sigma * r.sample::<f64, _>(StandardNormal)));
    }
    out
}

const GAP_BATCH: usize = 1000;

/// Gap of the ensemble prediction on `draws` noisy copies of `x`.
pub fn log_prob_gap_samples(
    net: &MultiHeadNetwork,
    x: &[f64],
    label: usize,
    sigma: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::input("gap sampling needs at least one draw"));
    }
    let mut r = rng::stream(seed, "gap", &[]);
    let mut gaps = Vec::with_capacity(draws);
    let mut remaining = draws;
    while remaining > 0 {
        let this = remaining.min(GAP_BATCH);
        let logits = net.forward_all_heads(&net.batch_tensor(&noisy_copies(x, sigma, this, &mut r))?)?;
        gaps.extend((0..this).map(|i| log_prob_gap(&logits.ensemble(i), label)));
        remaining -= this;
    }
    Ok(gaps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// `bins` equal-width bins spanning the data; every value lands in a bin.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

pub fn write_histogram_csv(h: &Histogram, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from("bin_left,bin_right,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(text, "{:.6},{:.6},{c}", h.edges[i], h.edges[i + 1]).unwrap();
    }
    write_text(path.as_ref(), &text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    pub mean_loss: f64,
    pub var_loss: f64,
    /// Group accuracy on each noise draw, then its mean and standard deviation.
    pub draw_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub accuracy_spread: f64,
}

impl GroupStats {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EasyHardReport {
    pub threshold: f64,
    pub draws: usize,
    /// Records with `radius * [correct] > threshold`.
    pub easy: GroupStats,
    pub hard: GroupStats,
}

impl EasyHardReport {
    pub fn to_csv(&self) -> String {
        let mut text = String::from("group,count,mean_loss,var_loss,mean_accuracy,accuracy_spread\n");
        for (name, g) in [("easy", &self.easy), ("hard", &self.hard)] {
            if g.is_empty() {
                writeln!(text, "{name},0,,,,").unwrap();
            } else {
                writeln!(
                    text,
                    "{name},{},{:.6},{:.6},{:.6},{:.6}",
                    g.count, g.mean_loss, g.var_loss, g.mean_accuracy, g.accuracy_spread
                )
                .unwrap();
            }
        }
        text
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

struct SampleEval {
    loss: f64,
    hits: Vec<bool>,
}

fn group_stats(samples: &[&SampleEval], draws: usize) -> GroupStats {
    let losses: Vec<f64> = samples.iter().map(|s| s.loss).collect();
    let (mean_loss, var_loss) = mean_var(&losses);
    let draw_accuracy: Vec<f64> = if samples.is_empty() {
        Vec::new()
    } else {
        (0..draws)
            .map(|j| samples.iter().filter(|s| s.hits[j]).count() as f64 / samples.len() as f64)
            .collect()
    };
    let (mean_accuracy, var_acc) = mean_var(&draw_accuracy);
    GroupStats {
        count: samples.len(),
        mean_loss,
        var_loss,
        draw_accuracy,
        mean_accuracy,
        accuracy_spread: var_acc.sqrt(),
    }
}

/// Splits records at `threshold` on `radius * [correct]` and summarizes each
/// group's smoothed ensemble loss (mean cross-entropy over `draws` noisy
/// copies) and per-draw accuracy. Records are matched to `dataset` by original index.
pub fn easy_hard_report(
    net: &MultiHeadNetwork,
    dataset: &Dataset,
    records: &[CertificationRecord],
    threshold: f64,
    sigma: f64,
    draws: usize,
    seed: u64,
) -> Result<EasyHardReport> {
    non_empty(records)?;
    if draws == 0 {
        return Err(Error::input("easy/hard analysis needs at least one draw"));
    }
    let position: std::collections::HashMap<usize, usize> =
        dataset.indices.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut evals = Vec::with_capacity(records.len());
    for rec in records {
        let &p = position
            .get(&rec.index)
            .ok_or_else(|| Error::input(format!("record index {} is not in the dataset", rec.index)))?;
        let label = dataset.labels[p];
        let mut r = rng::stream(seed, "easy-hard", &[rec.index as u64]);
        let batch = net.batch_tensor(&noisy_copies(dataset.input(p), sigma, draws, &mut r))?;
        let logits = net.forward_all_heads(&batch)?;
        let mut loss = 0.0;
        let mut hits = Vec::with_capacity(draws);
        for j in 0..draws {
            let e = logits.ensemble(j);
            loss += cross_entropy(&e, label)?;
            hits.push(argmax(&e) == label);
        }
        let score = if rec.correct { rec.radius } else { 0.0 };
        evals.push((
            score > threshold,
            SampleEval {
                loss: loss / draws as f64,
                hits,
            },
        ));
    }
    let easy: Vec<&SampleEval> = evals.iter().filter(|(e, _)| *e).map(|(_, s)| s).collect();
    let hard: Vec<&SampleEval> = evals.iter().filter(|(e, _)| !*e).map(|(_, s)| s).collect();
    Ok(EasyHardReport {
        threshold,
        draws,
        easy: group_stats(&easy, draws),
        hard: group_stats(&hard, draws),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub certify_seconds: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

pub fn runtime_report(timings: &Timings, cost: &CostReport) -> String {
    let mut out = String::new();
    let total: f64 = timings.certify_seconds.iter().sum();
    let n = timings.certify_seconds.len();
    writeln!(out, "certified samples      {n}").unwrap();
    writeln!(out, "certify total (s)      {total:.3}").unwrap();
    if n > 0 {
        writeln!(out, "certify per sample (s) {:.4}", total / n as f64).unwrap();
    }
    let epochs: f64 = timings.epoch_seconds.iter().sum();
    if !timings.epoch_seconds.is_empty() {
        writeln!(out, "train epochs           {}", timings.epoch_seconds.len()).unwrap();
        writeln!(
            out,
            "train per epoch (s)    {:.3}",
            epochs / timings.epoch_seconds.len() as f64
        )
        .unwrap();
    }
    write!(out, "{cost}").unwrap();
    out
}

//! Monte-Carlo prediction and certification of the smoothed ensemble.
//!
//! Every example draws its noise from its own stream keyed by the example's
//! original index, so results do not depend on evaluation order, sampling
//! batch size or the number of worker threads.

pub mod stats;

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MultiHeadNetwork;
use crate::rng::{self, Rng};

pub use stats::{binomial_test_half, lower_conf_bound, normal_cdf, normal_quantile};

/// A hard classifier evaluated on flat batches of inputs.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn input_len(&self) -> usize;
    /// Classifies `inputs.len() / input_len()` inputs stored back to back.
    fn classify(&self, inputs: &[f64]) -> Result<Vec<usize>>;
}

impl BaseClassifier for MultiHeadNetwork {
    fn num_classes(&self) -> usize {
        MultiHeadNetwork::num_classes(self)
    }

    fn input_len(&self) -> usize {
        MultiHeadNetwork::input_len(self)
    }

    fn classify(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        self.predict_batch(&self.batch_tensor(inputs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyConfig {
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub sigma: f64,
    /// Noisy inputs per classifier call; affects speed only.
    pub batch: usize,
    pub seed: u64,
}

impl CertifyConfig {
    pub fn new(sigma: f64) -> Self {
        CertifyConfig {
            n0: 100,
            n: 100_000,
            alpha: 0.001,
            sigma,
            batch: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 {
            return Err(Error::config("certify.n0 must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("certify.n must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "certify.alpha {} must lie in (0, 1)",
                self.alpha
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("certify.batch must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("noise.sigma must be a finite value >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationRecord {
    pub index: usize,
    pub label: usize,
    /// `None` when abstaining.
    pub prediction: Option<usize>,
    pub radius: f64,
    pub correct: bool,
    pub seconds: f64,
}

/// Class counts of the base classifier over `count` draws of `x + N(0, sigma^2 I)`.
/// Noise is consumed from `rng` one input at a time, whatever the batch size.
pub fn sample_counts(
    classifier: &dyn BaseClassifier,
    x: &[f64],
    count: u64,
    sigma: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<u64>> {
    let d = classifier.input_len();
    if x.len() != d {
        return Err(Error::input(format!(
            "input has {} values, classifier expects {d}",
            x.len()
        )));
    }
    let mut counts = vec![0u64; classifier.num_classes()];
    let mut remaining = count;
    let mut buf = Vec::with_capacity(batch.max(1) * d);
    while remaining > 0 {
        let this = remaining.min(batch.max(1) as u64) as usize;
        buf.clear();
        for _ in 0..this {
            buf.extend(x.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)));
        }
        for c in classifier.classify(&buf)? {
            counts[c] += 1;
        }
        remaining -= this as u64;
    }
    Ok(counts)
}

fn top_class(counts: &[u64]) -> usize {
    let mut best = 0;
    for (c, v) in counts.iter().enumerate() {
        if *v > counts[best] {
            best = c;
        }
    }
    best
}

/// Selection with `n0` draws, estimation with `n` fresh draws, then the
/// lower confidence bound on the top class. Abstains unless the bound exceeds 1/2.
pub fn certify(
    classifier: &dyn BaseClassifier,
    x: &[f64],
    label: usize,
    index: usize,
    config: &CertifyConfig,
) -> Result<CertificationRecord> {
    let start = Instant::now();
    let mut r = rng::stream(config.seed, "certify", &[index as u64]);
    let selection = sample_counts(classifier, x, config.n0, config.sigma, config.batch, &mut r)?;
    let guess = top_class(&selection);
    let counts = sample_counts(classifier, x, config.n, config.sigma, config.batch, &mut r)?;
    let p_lower = lower_conf_bound(counts[guess], config.n, config.alpha)?;
    let (prediction, radius) = if p_lower > 0.5 {
        (Some(guess), config.sigma * normal_quantile(p_lower)?)
    } else {
        (None, 0.0)
    };
    Ok(CertificationRecord {
        index,
        label,
        prediction,
        radius,
        correct: prediction == Some(label),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Top class if a two-sided binomial test of the top two counts rejects a tie at level `alpha`.
pub fn predict(
    classifier: &dyn BaseClassifier,
    x: &[f64],
    index: usize,
    config: &CertifyConfig,
) -> Result<Option<usize>> {
    let mut r = rng::stream(config.seed, "predict", &[index as u64]);
    let counts = sample_counts(classifier, x, config.n, config.sigma, config.batch, &mut r)?;
    Ok(predict_from_counts(&counts, config.alpha))
}

pub fn predict_from_counts(counts: &[u64], alpha: f64) -> Option<usize> {
    let top = top_class(counts);
    let runner_up = counts
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != top)
        .map(|(_, v)| *v)
        .max()
        .unwrap_or(0);
    let n_a = counts[top];
    (binomial_test_half(n_a, n_a + runner_up) <= alpha).then_some(top)
}

/// Certifies every example of `dataset` on `workers` threads; records come back
/// in dataset order and carry the examples' original indices.
pub fn certify_dataset(
    classifier: &dyn BaseClassifier,
    dataset: &Dataset,
    config: &CertifyConfig,
    workers: usize,
) -> Result<Vec<CertificationRecord>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                certify(
                    classifier,
                    dataset.input(i),
                    dataset.labels[i],
                    dataset.indices[i],
                    config,
                )
            })
            .collect()
    })
}

pub const TSV_HEADER: &str = "idx\tlabel\tpredict\tradius\tcorrect\ttime";

pub fn format_record(r: &CertificationRecord) -> String {
    let predict = r.prediction.map_or(-1, |p| p as i64);
    format!(
        "{}\t{}\t{}\t{:.3}\t{}\t{:.4}",
        r.index,
        r.label,
        predict,
        r.radius,
        u8::from(r.correct),
        r.seconds
    )
}

pub fn write_tsv(records: &[CertificationRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", format_record(r))?;
    }
    Ok(())
}

pub fn save_tsv(records: &[CertificationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tsv(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_tsv(text: impl BufRead, path: &Path) -> Result<Vec<CertificationRecord>> {
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line_no == 0 {
            if line.trim_end() != TSV_HEADER {
                return Err(Error::format(path, "missing certification header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: invalid {what}", line_no + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        let predict: i64 = f[2].parse().map_err(|_| bad("predict"))?;
        let radius: f64 = f[3].parse().map_err(|_| bad("radius"))?;
        if !(radius >= 0.0) {
            return Err(bad("radius"));
        }
        records.push(CertificationRecord {
            index: f[0].parse().map_err(|_| bad("idx"))?,
            label: f[1].parse().map_err(|_| bad("label"))?,
            prediction: if predict < 0 { None } else { Some(predict as usize) },
            radius,
            correct: match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("correct")),
            },
            seconds: f[5].parse().map_err(|_| bad("time"))?,
        });
    }
    Ok(records)
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<CertificationRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `w . x + b > 0` picks class 1.
    struct Linear {
        w: Vec<f64>,
        b: f64,
    }

    impl BaseClassifier for Linear {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_len(&self) -> usize {
            self.w.len()
        }
        fn classify(&self, inputs: &[f64]) -> Result<Vec<usize>> {
            Ok(inputs
                .chunks(self.w.len())
                .map(|x| usize::from(x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b > 0.0))
                .collect())
        }
    }

    struct Constant(usize);

    impl BaseClassifier for Constant {
        fn num_classes(&self) -> usize {
            10
        }
        fn input_len(&self) -> usize {
            2
        }
        fn classify(&self, inputs: &[f64]) -> Result<Vec<usize>> {
            Ok(vec![self.0; inputs.len() / 2])
        }
    }

    #[test]
    fn counting_examples() {
        let mut r = rng::stream(0, "t", &[]);
        let c = sample_counts(&Constant(3), &[0.0, 0.0], 57, 1.0, 10, &mut r).unwrap();
        assert_eq!(c[3], 57);
        let lin = Linear { w: vec![1.0], b: 0.0 };
        let c = sample_counts(&lin, &[0.2], 100, 0.0, 7, &mut r).unwrap();
        assert_eq!(c, vec![0, 100]);
        let c = sample_counts(&lin, &[0.0], 10_000, 1.0, 333, &mut r).unwrap();
        assert!((c[1] as i64 - 5000).abs() <= 200, "{c:?}");
    }

    #[test]
    fn batch_size_does_not_change_counts() {
        let lin = Linear {
            w: vec![1.0, -0.5],
            b: 0.1,
        };
        let a = sample_counts(&lin, &[0.1, 0.3], 1000, 0.5, 1, &mut rng::stream(4, "t", &[])).unwrap();
        let b = sample_counts(&lin, &[0.1, 0.3], 1000, 0.5, 999, &mut rng::stream(4, "t", &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radius_approaches_margin() {
        let lin = Linear {
            w: vec![3.0, 4.0],
            b: -1.0,
        };
        let x = [0.5, 0.5];
        let margin = (3.0 * 0.5 + 4.0 * 0.5 - 1.0f64).abs() / 5.0;
        let mut config = CertifyConfig::new(0.5);
        config.n = 10_000;
        let rec = certify(&lin, &x, 1, 0, &config).unwrap();
        assert_eq!(rec.prediction, Some(1));
        assert!(rec.radius < margin, "{} vs {margin}", rec.radius);
        assert!(rec.radius > margin - 0.15, "{} vs {margin}", rec.radius);
    }

    #[test]
    fn abstains_near_the_boundary() {
        let lin = Linear { w: vec![1.0], b: 0.0 };
        let rec = certify(
            &lin,
            &[0.0],
            1,
            3,
            &CertifyConfig {
                n: 1000,
                ..CertifyConfig::new(1.0)
            },
        )
        .unwrap();
        assert_eq!(rec.prediction, None);
        assert_eq!(rec.radius, 0.0);
        assert!(!rec.correct);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_from_counts(&[0, 100, 0], 0.001), Some(1));
        assert_eq!(predict_from_counts(&[40, 60], 0.001), None);
        assert_eq!(predict_from_counts(&[50, 50], 0.5), None);
        let lin = Linear { w: vec![1.0], b: 0.0 };
        let config = CertifyConfig {
            n: 500,
            ..CertifyConfig::new(0.1)
        };
        assert_eq!(predict(&lin, &[1.0], 0, &config).unwrap(), Some(1));
    }

    #[test]
    fn radius_scales_with_sigma() {
        // Same draws in units of sigma: x scaled with sigma gives the same votes.
        let lin = Linear { w: vec![1.0], b: 0.0 };
        let a = certify(
            &lin,
            &[0.3],
            1,
            9,
            &CertifyConfig {
                n: 2000,
                ..CertifyConfig::new(0.25)
            },
        )
        .unwrap();
        let b = certify(
            &lin,
            &[0.6],
            1,
            9,
            &CertifyConfig {
                n: 2000,
                ..CertifyConfig::new(0.5)
            },
        )
        .unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert!((2.0 * a.radius - b.radius).abs() < 1e-12);
    }

    #[test]
    fn tsv_round_trip() {
        let records = vec![
            CertificationRecord {
                index: 0,
                label: 3,
                prediction: Some(3),
                radius: 0.4567,
                correct: true,
                seconds: 1.25,
            },
            CertificationRecord {
                index: 20,
                label: 1,
                prediction: None,
                radius: 0.0,
                correct: false,
                seconds: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_tsv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("idx\tlabel\tpredict\tradius\tcorrect\ttime\n0\t3\t3\t0.457\t1\t"));
        assert!(text.contains("\n20\t1\t-1\t0.000\t0\t"));
        let back = parse_tsv(buf.as_slice(), Path::new("r.tsv")).unwrap();
        assert_eq!(back[1], records[1]);
        assert_eq!(back[0].radius, 0.457);
        assert!(parse_tsv("bad\n".as_bytes(), Path::new("r.tsv")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CertifyConfig {
            alpha: 1.0,
            ..CertifyConfig::new(0.25)
        }
        .validate()
        .is_err());
        assert!(CertifyConfig {
            n0: 0,
            ..CertifyConfig::new(0.25)
        }
        .validate()
        .is_err());
        assert!(CertifyConfig::new(0.25).validate().is_ok());
    }
}

//! Exact binomial bounds and the standard normal quantile.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0`.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

/// One-sided Clopper-Pearson lower bound on a binomial proportion: the
/// `alpha` quantile of `Beta(k, n - k + 1)`.
pub fn lower_conf_bound(k: u64, n: u64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if k > n {
        return Err(Error::input(format!("{k} successes out of {n} trials")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let (mut lo, mut hi) = (0.0f64, k as f64 / n as f64);
    while hi - lo > 1e-12 * hi.max(1e-300) && hi - lo > f64::MIN_POSITIVE {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if regularized_beta(mid, a, b) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // `lo` keeps `I_lo < alpha`, so it never overstates the bound.
    Ok(lo)
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    regularized_beta(p, k as f64, (n - k + 1) as f64)
}

/// Two-sided binomial test of `successes` out of `trials` against rate 1/2.
pub fn binomial_test_half(successes: u64, trials: u64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let k = successes.max(trials - successes);
    (2.0 * binomial_upper_tail(k, trials, 0.5)).min(1.0)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

/// Rational approximation for the normal quantile (Wichura's PPND16).
#[allow(clippy::excessive_precision)]
fn quantile_estimate(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// `Phi^-1(p)`: rational estimate refined by one Newton step on the CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::input(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    if p > 0.5 {
        return Ok(-normal_quantile(1.0 - p)?);
    }
    let x = quantile_estimate(p);
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density == 0.0 {
        return Ok(x);
    }
    Ok(x - (normal_cdf(x) - p) / density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF, Normal};

    #[test]
    fn ln_gamma_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        let oracle = statrs::function::gamma::ln_gamma(100_000.5);
        assert!((ln_gamma(100_000.5) - oracle).abs() < 1e-8 * oracle);
    }

    #[test]
    fn incomplete_beta_matches_oracle() {
        for &(x, a, b) in &[
            (0.3, 2.0, 5.0),
            (0.9, 50.0, 51.0),
            (0.41, 50.0, 51.0),
            (0.999, 99_990.0, 11.0),
            (0.5, 0.5, 0.5),
        ] {
            let oracle = statrs::function::beta::beta_reg(a, b, x);
            assert!((regularized_beta(x, a, b) - oracle).abs() < 1e-12, "{x} {a} {b}");
        }
    }

    #[test]
    fn clopper_pearson_examples() {
        for n in [10, 100, 100_000] {
            for alpha in [0.05, 0.001] {
                assert_eq!(lower_conf_bound(0, n, alpha).unwrap(), 0.0);
                let want = alpha.powf(1.0 / n as f64);
                assert!((lower_conf_bound(n, n, alpha).unwrap() - want).abs() < 1e-9);
            }
        }
        assert!((lower_conf_bound(100, 100, 0.001).unwrap() - 0.933254).abs() < 1e-6);
        let b = lower_conf_bound(50, 100, 0.05).unwrap();
        let oracle = Beta::new(50.0, 51.0).unwrap().inverse_cdf(0.05);
        assert!((b - oracle).abs() < 1e-9, "{b} {oracle}");
        assert!((b - 0.413).abs() < 1e-3);
        assert!(lower_conf_bound(5, 10, 1.0).is_err());
        assert!(lower_conf_bound(11, 10, 0.1).is_err());
    }

    #[test]
    fn clopper_pearson_near_certainty() {
        let b = lower_conf_bound(99_990, 100_000, 0.001).unwrap();
        let oracle = Beta::new(99_990.0, 11.0).unwrap().inverse_cdf(0.001);
        assert!((b - oracle).abs() < 1e-9, "{b} {oracle}");
    }

    #[test]
    fn binomial_test_examples() {
        let p = binomial_test_half(100, 100);
        assert!((p - 2.0 * 0.5f64.powi(100)).abs() < 1e-40);
        let p = binomial_test_half(60, 100);
        let oracle = 2.0 * Binomial::new(0.5, 100).unwrap().sf(59);
        assert!((p - oracle).abs() < 1e-12, "{p} {oracle}");
        assert!((p - 0.0569).abs() < 1e-3);
        assert_eq!(binomial_test_half(50, 100), 1.0);
    }

    #[test]
    fn normal_quantile_examples() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-6);
        let radius = 0.25 * normal_quantile(0.001f64.powf(0.01)).unwrap();
        let oracle = 0.25 * Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.001f64.powf(0.01));
        assert!((radius - oracle).abs() < 1e-9);
        assert!((radius - 0.3751188).abs() < 1e-6);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn normal_quantile_accuracy_over_range() {
        let oracle = Normal::new(0.0, 1.0).unwrap();
        let mut p = 1e-12;
        while p < 0.5 {
            let got = normal_quantile(p).unwrap();
            // Compare through the CDF, which statrs evaluates with a high-accuracy erfc.
            let want = oracle.inverse_cdf(p);
            assert!((got - want).abs() < 1e-9, "{p}: {got} vs {want}");
            p *= 1.7;
        }
    }

    proptest! {
        #[test]
        fn quantile_is_antisymmetric(p in 1e-12f64..0.5) {
            let a = normal_quantile(p).unwrap();
            let b = normal_quantile(1.0 - p).unwrap();
            prop_assert!((a + b).abs() < 1e-9);
        }

        #[test]
        fn bound_is_monotone_and_conservative(n in 1u64..400, k in 0u64..400, alpha in 0.0005f64..0.2) {
            let k = k.min(n);
            let b = lower_conf_bound(k, n, alpha).unwrap();
            prop_assert!(b <= k as f64 / n as f64);
            prop_assert!((0.0..=1.0).contains(&b));
            if k < n {
                prop_assert!(lower_conf_bound(k + 1, n + 1, alpha).unwrap() >= b);
                prop_assert!(lower_conf_bound(k, n + 1, alpha).unwrap() <= b);
            }
        }
    }
}

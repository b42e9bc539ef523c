//! Gaussian tail math and binomial interval estimates used by the
//! analytic baselines and the Monte Carlo reports.

/// Complementary error function.
///
/// Chebyshev-fitted rational approximation (Numerical Recipes `erfcc`),
/// fractional error below 1.2e-7 everywhere; plenty for oracle values that
/// are compared against Monte Carlo noise orders of magnitude larger.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z
        - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
    .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Gaussian tail probability Q(x) = P(N(0,1) > x) = erfc(x/sqrt(2))/2.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF (Wichura's AS 241, PPND16 variant).
///
/// Accurate to about 1e-15 over (0, 1); this is the normal transform behind
/// every Gaussian draw in the lab, chosen because it consumes exactly one
/// uniform per normal and therefore keeps counter-based streams aligned.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inverse_normal_cdf domain: {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_545_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Two-sided binomial confidence interval for an error probability.
///
/// Normal approximation for well-populated counts; exact Clopper-Pearson
/// (via bisection on the binomial tail, cheap because it is only used when
/// fewer than 10 errors were observed) otherwise.
pub fn binomial_ci(errors: u64, trials: u64, confidence: f64) -> (f64, f64) {
    assert!(trials > 0, "binomial_ci needs at least one trial");
    assert!(errors <= trials);
    let alpha = 1.0 - confidence;
    let n = trials as f64;
    let x = errors as f64;
    let p_hat = x / n;
    if errors >= 10 && trials - errors >= 10 {
        let z = inverse_normal_cdf(1.0 - alpha / 2.0);
        let half = z * (p_hat * (1.0 - p_hat) / n).sqrt();
        return ((p_hat - half).max(0.0), (p_hat + half).min(1.0));
    }
    let lo = if errors == 0 {
        0.0
    } else {
        // Largest p with P(X >= errors | p) <= alpha/2.
        bisect(|p| binom_tail_ge(errors, trials, p) - alpha / 2.0)
    };
    let hi = if errors == trials {
        1.0
    } else {
        // Smallest p with P(X <= errors | p) <= alpha/2.
        bisect(|p| alpha / 2.0 - binom_tail_le(errors, trials, p))
    };
    (lo, hi)
}

/// Root of a function that is increasing in p over (0, 1).
fn bisect(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// log C(n, i) for small i, via the running product.
fn ln_choose(n: u64, i: u64) -> f64 {
    let mut acc = 0.0;
    for j in 1..=i {
        acc += (((n - j + 1) as f64) / (j as f64)).ln();
    }
    acc
}

/// P(X <= x) for X ~ Binomial(n, p); only called with small x.
fn binom_tail_le(x: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if x >= n { 1.0 } else { 0.0 };
    }
    let ln_q = (-p).ln_1p(); // ln(1 - p) without cancellation
    let mut sum = 0.0;
    for i in 0..=x {
        let ln_term = ln_choose(n, i) + (i as f64) * p.ln() + ((n - i) as f64) * ln_q;
        sum += ln_term.exp();
    }
    sum.min(1.0)
}

/// P(X >= x) = 1 - P(X <= x-1); only called with small x.
fn binom_tail_ge(x: u64, n: u64, p: f64) -> f64 {
    if x == 0 {
        return 1.0;
    }
    1.0 - binom_tail_le(x - 1, n, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfc_reference_points() {
        // erfc(0) = 1, erfc(1) = 0.15729920705028513..., symmetry.
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1e-7);
        assert!((erfc(-1.0) - (2.0 - 0.157_299_207_050_285_13)).abs() < 1e-7);
    }

    #[test]
    fn q_function_anchor() {
        // Q(0) = 0.5 and a table value Q(1.96) ~ 0.0249979.
        assert!((q_function(0.0) - 0.5).abs() < 1e-7);
        assert!((q_function(1.96) - 0.024_997_9).abs() < 1e-6);
    }

    #[test]
    fn inverse_cdf_round_trips() {
        for &p in &[1e-9, 1e-4, 0.025, 0.31, 0.5, 0.77, 0.975, 1.0 - 1e-6] {
            let x = inverse_normal_cdf(p);
            assert!(
                (normal_cdf(x) - p).abs() < 2e-7,
                "round trip failed at p={p}: x={x}"
            );
        }
        assert!((inverse_normal_cdf(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(inverse_normal_cdf(0.5).abs() < 1e-15);
    }

    #[test]
    fn ci_contains_point_estimate() {
        let (lo, hi) = binomial_ci(50, 1000, 0.95);
        assert!(lo < 0.05 && 0.05 < hi);
        // Exact branch.
        let (lo, hi) = binomial_ci(3, 1000, 0.95);
        assert!(lo < 0.003 && 0.003 < hi);
        assert!(lo > 0.0);
        let (lo, hi) = binomial_ci(0, 1000, 0.95);
        assert_eq!(lo, 0.0);
        // For x=0 the exact upper bound is 1-(alpha/2)^(1/n).
        let expect = 1.0 - (0.025_f64).powf(1.0 / 1000.0);
        assert!((hi - expect).abs() < 1e-6, "hi={hi} expect={expect}");
    }
}

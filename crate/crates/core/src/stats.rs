//! Hypothesis tests used by the significance protocol: Shapiro-Wilk
//! (Royston's AS R94 approximation), the one-tailed paired t-test and the
//! one-tailed Wilcoxon signed-rank test. Special functions live in
//! [`special`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod special {
    //! Log-gamma, regularized incomplete gamma/beta, and the normal and
    //! Student-t distribution functions built on them.

    use std::f64::consts::PI;

    const LANCZOS_G: f64 = 7.0;
    const LANCZOS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];

    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 500;

    pub fn ln_gamma(x: f64) -> f64 {
        if x < 0.5 {
            // reflection
            (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
        } else {
            let x = x - 1.0;
            let mut acc = LANCZOS[0];
            for (i, c) in LANCZOS.iter().enumerate().skip(1) {
                acc += c / (x + i as f64);
            }
            let t = x + LANCZOS_G + 0.5;
            0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
        }
    }

    /// Regularized lower incomplete gamma `P(a, x)`.
    pub fn gamma_p(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x < a + 1.0 {
            gamma_series(a, x)
        } else {
            1.0 - gamma_continued_fraction(a, x)
        }
    }

    /// Regularized upper incomplete gamma `Q(a, x)`.
    pub fn gamma_q(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            1.0
        } else if x < a + 1.0 {
            1.0 - gamma_series(a, x)
        } else {
            gamma_continued_fraction(a, x)
        }
    }

    fn gamma_series(a: f64, x: f64) -> f64 {
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    }

    fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }

    pub fn erfc(x: f64) -> f64 {
        if x >= 0.0 {
            gamma_q(0.5, x * x)
        } else {
            2.0 - gamma_q(0.5, x * x)
        }
    }

    /// Regularized incomplete beta `I_x(a, b)`.
    pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        if x < (a + 1.0) / (a + b + 2.0) {
            ln_front.exp() * beta_continued_fraction(a, b, x) / a
        } else {
            1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
        }
    }

    fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..MAX_ITER {
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
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    pub fn normal_cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    pub fn normal_sf(x: f64) -> f64 {
        0.5 * erfc(x / std::f64::consts::SQRT_2)
    }

    /// Inverse standard normal CDF: Acklam's rational approximation followed
    /// by one Halley step.
    pub fn normal_quantile(p: f64) -> f64 {
        const A: [f64; 6] = [
            -3.969_683_028_665_376e1,
            2.209_460_984_245_205e2,
            -2.759_285_104_469_687e2,
            1.383_577_518_672_69e2,
            -3.066_479_806_614_716e1,
            2.506_628_277_459_239,
        ];
        const B: [f64; 5] = [
            -5.447_609_879_822_406e1,
            1.615_858_368_580_409e2,
            -1.556_989_798_598_866e2,
            6.680_131_188_771_972e1,
            -1.328_068_155_288_572e1,
        ];
        const C: [f64; 6] = [
            -7.784_894_002_430_293e-3,
            -3.223_964_580_411_365e-1,
            -2.400_758_277_161_838,
            -2.549_732_539_343_734,
            4.374_664_141_464_968,
            2.938_163_982_698_783,
        ];
        const D: [f64; 4] = [
            7.784_695_709_041_462e-3,
            3.224_671_290_700_398e-1,
            2.445_134_137_142_996,
            3.754_408_661_907_416,
        ];
        const P_LOW: f64 = 0.024_25;

        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let x = if p < P_LOW {
            let q = (-2.0 * p.ln()).sqrt();
            (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        } else if p <= 1.0 - P_LOW {
            let q = p - 0.5;
            let r = q * q;
            (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
                / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
        } else {
            let q = (-2.0 * (1.0 - p).ln()).sqrt();
            -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        };
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (x * x / 2.0).exp();
        x - u / (1.0 + x * u / 2.0)
    }

    /// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
    pub fn student_t_sf(t: f64, df: f64) -> f64 {
        let tail = 0.5 * beta_inc(df / 2.0, 0.5, df / (df + t * t));
        if t >= 0.0 {
            tail
        } else {
            1.0 - tail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method_note: String,
}

fn finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{what} contains a non-finite value"
        )));
    }
    Ok(())
}

fn poly(coefficients: &[f64], x: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Shapiro-Wilk normality test for `3 <= n <= 5000` (Royston 1995).
pub fn shapiro_wilk(x: &[f64]) -> Result<TestResult> {
    const SMALL: f64 = 1e-19;
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::InvalidParameter(format!(
            "Shapiro-Wilk needs 3 <= n <= 5000, got {n}"
        )));
    }
    finite(x, "Shapiro-Wilk input")?;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[n - 1] - sorted[0];
    if range < SMALL {
        return Err(Error::Degenerate("Shapiro-Wilk input is constant".into()));
    }

    // half-vector of coefficients for the lower order statistics, positive
    let half = n / 2;
    let nf = n as f64;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> = (1..=half)
            .map(|i| special::normal_quantile((i as f64 - 0.375) / (nf + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            (2, fac)
        } else {
            (
                1,
                ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt(),
            )
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mut coef = vec![0.0; n];
    for i in 0..half {
        coef[i] = -a[i];
        coef[n - 1 - i] = a[i];
    }
    let scaled: Vec<f64> = sorted.iter().map(|v| v / range).collect();
    let mean = scaled.iter().sum::<f64>() / nf;
    let ssx: f64 = scaled.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ssa: f64 = coef.iter().map(|c| c * c).sum();
    let sax: f64 = coef.iter().zip(&scaled).map(|(c, v)| c * (v - mean)).sum();
    let w = (sax * sax / (ssa * ssx)).min(1.0);
    let w1 = 1.0 - w;

    let p_value = if n == 3 {
        const SIX_OVER_PI: f64 = 1.909_859_317_102_74;
        const PI_OVER_THREE: f64 = 1.047_197_551_196_6;
        (SIX_OVER_PI * (w.sqrt().asin() - PI_OVER_THREE)).clamp(0.0, 1.0)
    } else if w1 <= 0.0 {
        1.0
    } else {
        let mut y = w1.ln();
        let (mu, sigma) = if n <= 11 {
            let gamma = poly(&G, nf);
            if y >= gamma {
                return Ok(TestResult {
                    statistic: w,
                    p_value: 1e-99,
                    n_effective: n,
                    method_note: "Royston AS R94, small-sample bound".into(),
                });
            }
            y = -(gamma - y).ln();
            (poly(&C3, nf), poly(&C4, nf).exp())
        } else {
            let ln_n = nf.ln();
            (poly(&C5, ln_n), poly(&C6, ln_n).exp())
        };
        special::normal_sf((y - mu) / sigma)
    };

    Ok(TestResult {
        statistic: w,
        p_value: p_value.clamp(0.0, 1.0),
        n_effective: n,
        method_note: if n == 3 {
            "Royston AS R94, exact for n = 3".into()
        } else {
            "Royston AS R94".into()
        },
    })
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidParameter(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    finite(a, "paired sample")?;
    finite(b, "paired sample")?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Paired t-test of `H1: mean(a - b) > 0`.
///
/// Identical samples (`a == b` everywhere) give `t = 0, p = 0.5`; any other
/// zero-variance difference vector is rejected.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let d = differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "paired t-test needs n >= 2, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        if d.iter().all(|&v| v == 0.0) {
            return Ok(TestResult {
                statistic: 0.0,
                p_value: 0.5,
                n_effective: n,
                method_note: "identical samples".into(),
            });
        }
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    Ok(TestResult {
        statistic: t,
        p_value: special::student_t_sf(t, nf - 1.0).clamp(0.0, 1.0),
        n_effective: n,
        method_note: format!("Student t, df = {}", n - 1),
    })
}

/// Ranks of `values` (1-based), averaging ties.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Largest number of non-zero differences handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Null distribution of the signed-rank statistic for the given ranks, as
/// `(statistic, probability)` pairs in increasing statistic order. Each rank
/// enters the statistic with probability 1/2, independently.
pub fn signed_rank_null(ranks: &[f64]) -> Vec<(f64, f64)> {
    // mid-ranks are multiples of 1/2, so doubled ranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(ranks.len() as i32);
    counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c != 0.0)
        .map(|(s, c)| (s as f64 / 2.0, c / total))
        .collect()
}

/// Wilcoxon signed-rank test of `H1: a > b`.
///
/// Zero differences are dropped. The statistic is the rank sum of negative
/// differences; small values support `H1`.
pub fn wilcoxon_one_tailed(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let d: Vec<f64> = differences(a, b)?
        .into_iter()
        .filter(|&v| v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let magnitudes: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = mid_ranks(&magnitudes);
    let w_minus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v < 0.0)
        .fold(0.0, |acc, (_, r)| acc + r);

    let (p_value, method_note) = if n <= WILCOXON_EXACT_MAX {
        let p: f64 = signed_rank_null(&ranks)
            .into_iter()
            .take_while(|(w, _)| *w <= w_minus + 1e-9)
            .map(|(_, prob)| prob)
            .sum();
        (p, "exact, zero differences dropped")
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = magnitudes.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_minus + 0.5 - mean) / var.sqrt();
        (
            special::normal_cdf(z),
            "normal approximation with tie and continuity correction, zero differences dropped",
        )
    };
    Ok(TestResult {
        statistic: w_minus,
        p_value: p_value.clamp(0.0, 1.0),
        n_effective: n,
        method_note: method_note.into(),
    })
}

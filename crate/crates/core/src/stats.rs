//! Paired statistics for seed-replicated comparisons.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample statistics with an `n − 1` denominator and a two-sided 95% t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl SummaryStat {
    pub fn ci95_half_width(&self) -> f64 {
        (self.ci95_high - self.ci95_low) / 2.0
    }
}

pub fn mean_sd(x: &[f64]) -> Result<SummaryStat> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mean_sd needs at least 2 values, got {n}")));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let half = t_quantile(0.975, n - 1)? * sd / (n as f64).sqrt();
    Ok(SummaryStat { n, mean, sd, ci95_low: mean - half, ci95_high: mean + half })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Self {
        let labels = (0..a.len()).map(|i| i.to_string()).collect();
        PairedSample { labels, a, b }
    }
}

/// Paired t-test on `d_i = a_i − b_i`.
///
/// With zero-variance differences `t`, `p` and `d` are undefined; the result is then
/// returned with `degenerate = true` and those fields set to `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub df: usize,
    pub t: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub cohens_d: Option<f64>,
    pub degenerate: bool,
}

pub fn paired_t_test(s: &PairedSample) -> Result<TTestResult> {
    if s.a.len() != s.b.len() {
        return Err(Error::InvalidArgument(format!("paired sample lengths differ: {} vs {}", s.a.len(), s.b.len())));
    }
    let d: Vec<f64> = s.a.iter().zip(&s.b).map(|(a, b)| a - b).collect();
    let st = mean_sd(&d)?;
    let (n, df) = (st.n, st.n - 1);
    if !(st.sd > 0.0) {
        return Ok(TTestResult { n, mean_diff: st.mean, sd_diff: st.sd, df, t: None, p_two_sided: None, cohens_d: None, degenerate: true });
    }
    let t = st.mean / (st.sd / (n as f64).sqrt());
    let p = 2.0 * student_t_sf(t.abs(), df as f64);
    Ok(TTestResult {
        n,
        mean_diff: st.mean,
        sd_diff: st.sd,
        df,
        t: Some(t),
        p_two_sided: Some(p.min(1.0)),
        cohens_d: Some(st.mean / st.sd),
        degenerate: false,
    })
}

/// Student-t CDF through the regularized incomplete beta function.
pub fn student_t_cdf(t: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(Error::InvalidArgument("student_t_cdf needs df >= 1".into()));
    }
    if t.is_nan() {
        return Err(Error::InvalidArgument("student_t_cdf of NaN".into()));
    }
    let nu = df as f64;
    Ok(if t >= 0.0 { 1.0 - student_t_sf(t, nu) } else { student_t_sf(-t, nu) })
}

/// Upper tail `P(T > t)` for `t ≥ 0`.
fn student_t_sf(t: f64, nu: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = nu / (nu + t * t);
    0.5 * reg_inc_beta(nu / 2.0, 0.5, x)
}

/// Quantile of Student's t by bisection on the CDF.
pub fn t_quantile(p: f64, df: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("t_quantile needs p in (0, 1), got {p}")));
    }
    if p < 0.5 {
        return t_quantile(1.0 - p, df).map(|q| -q);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_cdf(hi, df)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const C: [f64; 9] = [
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
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
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
    for m in 1..=10_000 {
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

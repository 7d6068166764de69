//! Calibration of the affine spread from historical prices and interchange.
//!
//! The regression `P_b = w1 P_a + w2 Q + w3` is fitted by least squares. When
//! `w1` is close to one the spread `P_b - P_a` is affine in the schedule, and
//! a one-dimensional fit of the spread on `Q` yields `(alpha, beta)`.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spread::SpreadModel;

/// Accepted range of `w1` for reading the spread as affine in `Q`.
pub const W1_CONVERTIBLE: (f64, f64) = (0.9, 1.1);
/// Diagonal entries of `R` below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MarketSample {
    pub timestamp: DateTime<Utc>,
    pub price_area_a: f64,
    pub price_area_b: f64,
    pub interchange_q: f64,
}

impl MarketSample {
    pub fn spread(&self) -> f64 {
        self.price_area_b - self.price_area_a
    }
}

/// Header names of the four input columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub timestamp: String,
    pub price_a: String,
    pub price_b: String,
    pub q_mw: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            price_a: "price_a".into(),
            price_b: "price_b".into(),
            q_mw: "q_mw".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSamples {
    /// Samples in timestamp order.
    pub samples: Vec<MarketSample>,
    /// Rows dropped for missing or unparseable fields or repeated timestamps.
    pub skipped: usize,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .ok()
        .or_else(|| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M").ok().map(|t| t.and_utc()))
}

fn parse_finite(s: Option<&str>) -> Option<f64> {
    s?.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_samples(path: impl AsRef<Path>, columns: &ColumnMapping) -> Result<LoadedSamples> {
    let file = std::fs::File::open(path.as_ref())?;
    read_samples(file, columns)
}

pub fn read_samples<R: std::io::Read>(input: R, columns: &ColumnMapping) -> Result<LoadedSamples> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))
    };
    let (it, ia, ib, iq) = (
        index(&columns.timestamp)?,
        index(&columns.price_a)?,
        index(&columns.price_b)?,
        index(&columns.q_mw)?,
    );

    let mut samples = Vec::new();
    let mut skipped = 0;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let parsed = (|| {
            Some(MarketSample {
                timestamp: parse_timestamp(row.get(it)?)?,
                price_area_a: parse_finite(row.get(ia))?,
                price_area_b: parse_finite(row.get(ib))?,
                interchange_q: parse_finite(row.get(iq))?,
            })
        })();
        match parsed {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    samples.sort_by_key(|s| s.timestamp);
    let before = samples.len();
    samples.dedup_by_key(|s| s.timestamp);
    skipped += before - samples.len();
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("no valid rows ({skipped} skipped)")));
    }
    Ok(LoadedSamples { samples, skipped })
}

/// Which price is explained by the other price and the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependent {
    AreaA,
    AreaB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub dependent: Dependent,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub adjusted_r2: f64,
    /// Spread intercept read off the fit with `w1 = 1`.
    pub implied_alpha: f64,
    pub implied_beta: f64,
    pub n_samples: usize,
}

/// Least-squares coefficients of `y` on the columns of `x`, via thin QR.
pub fn least_squares(x: DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let qr = x.qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    if scale == 0.0 || r.diagonal().iter().any(|d| d.abs() <= RANK_TOL * scale) {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient)
}

pub fn fit_regression(samples: &[MarketSample], dependent: Dependent) -> Result<RegressionFit> {
    let n = samples.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("regression needs at least 4 samples, got {n}")));
    }
    let (y, other): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .map(|s| match dependent {
            Dependent::AreaA => (s.price_area_a, s.price_area_b),
            Dependent::AreaB => (s.price_area_b, s.price_area_a),
        })
        .unzip();
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => other[i],
        1 => samples[i].interchange_q,
        _ => 1.0,
    });
    let y = DVector::from_vec(y);
    let w = least_squares(x.clone(), &y)?;

    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InsufficientData("dependent price is constant".into()));
    }
    let ss_res = (&y - &x * &w).norm_squared();
    let r2 = 1.0 - ss_res / ss_tot;
    let p = 2.0;
    let adjusted_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p - 1.0);

    // the spread is price_b - price_a, so its sign flips with the dependent side
    let sign = match dependent {
        Dependent::AreaB => 1.0,
        Dependent::AreaA => -1.0,
    };
    Ok(RegressionFit {
        dependent,
        w1: w[0],
        w2: w[1],
        w3: w[2],
        adjusted_r2,
        implied_alpha: sign * w[2],
        implied_beta: -sign * w[1],
        n_samples: n,
    })
}

/// Affine spread from a fit whose `w1` supports the affine reading.
///
/// With `w1` fixed to one, `alpha` and `beta` come from regressing the
/// observed spread on the schedule.
pub fn to_spread_model(fit: &RegressionFit, samples: &[MarketSample]) -> Result<SpreadModel> {
    let (lo, hi) = W1_CONVERTIBLE;
    if !(lo..=hi).contains(&fit.w1) {
        return Err(Error::NotConvertible(format!("w1 = {} outside [{lo}, {hi}]", fit.w1)));
    }
    let (alpha, beta) = fit_spread_line(samples)?;
    if !(beta > 0.0) {
        return Err(Error::NotConvertible(format!("spread does not decrease in the schedule (beta = {beta})")));
    }
    SpreadModel::affine(alpha, beta).map_err(|e| Error::NotConvertible(e.to_string()))
}

/// `(alpha, beta)` of the least-squares line `spread = alpha - beta Q`.
pub fn fit_spread_line(samples: &[MarketSample]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("spread line needs at least 2 samples, got {n}")));
    }
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { samples[i].interchange_q } else { 1.0 });
    let y = DVector::from_iterator(n, samples.iter().map(MarketSample::spread));
    let w = least_squares(x, &y)?;
    Ok((w[1], -w[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub mean: f64,
    pub abs_mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub n_samples: usize,
}

pub fn spread_stats(samples: &[MarketSample]) -> Result<SpreadStats> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(MarketSample::spread).sum::<f64>() / n;
    let abs_mean = samples.iter().map(|s| s.spread().abs()).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.spread() - mean).powi(2)).sum::<f64>() / n;
    Ok(SpreadStats {
        mean,
        abs_mean,
        std_dev: var.sqrt(),
        n_samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(hour: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2018, 1, 1 + hour / 24, hour % 24, 0, 0).unwrap()
    }

    fn sample(h: u32, a: f64, b: f64, q: f64) -> MarketSample {
        MarketSample {
            timestamp: at(h),
            price_area_a: a,
            price_area_b: b,
            interchange_q: q,
        }
    }

    #[test]
    fn timestamps_in_both_formats() {
        assert_eq!(parse_timestamp("2018-01-01 05:00"), Some(at(5)));
        assert_eq!(parse_timestamp("2018-01-01T05:00:00Z"), Some(at(5)));
        assert_eq!(parse_timestamp("2018-01-01T00:00:00-05:00"), Some(at(5)));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn loads_sorted_and_counts_malformed() {
        let text = "timestamp,price_a,price_b,q_mw\n\
                    2018-01-01 02:00,30,31,100\n\
                    2018-01-01 00:00,30,32,90\n\
                    2018-01-01 01:00,30,,95\n\
                    2018-01-01 03:00,30,33\n\
                    2018-01-01 00:00,1,1,1\n\
                    2018-01-01 04:00,NaN,33,80\n";
        let got = read_samples(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(got.samples.len(), 2);
        assert_eq!(got.skipped, 4);
        assert_eq!(got.samples[0].timestamp, at(0));
        assert_eq!(got.samples[1].spread(), 1.0);
    }

    #[test]
    fn load_errors() {
        assert!(read_samples("".as_bytes(), &ColumnMapping::default()).is_err());
        assert!(matches!(
            read_samples("timestamp,price_a\n".as_bytes(), &ColumnMapping::default()),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            read_samples("timestamp,price_a,price_b,q_mw\nx,1,2,3\n".as_bytes(), &ColumnMapping::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn column_mapping_renames() {
        let cols = ColumnMapping {
            timestamp: "Time".into(),
            price_a: "LMP_NY".into(),
            price_b: "LMP_NE".into(),
            q_mw: "Flow".into(),
        };
        let text = "Flow,LMP_NE,LMP_NY,Time\n10,5,4,2018-01-01 00:00\n";
        let got = read_samples(text.as_bytes(), &cols).unwrap();
        assert_eq!(got.samples, vec![sample(0, 4.0, 5.0, 10.0)]);
    }

    fn synthetic(w: (f64, f64, f64)) -> Vec<MarketSample> {
        (0..50)
            .map(|h| {
                let a = 30.0 + (h as f64 * 0.7).sin() * 10.0;
                let q = 800.0 + (h as f64 * 1.3).cos() * 400.0;
                sample(h, a, w.0 * a + w.1 * q + w.2, q)
            })
            .collect()
    }

    #[test]
    fn noiseless_fit_recovers_coefficients() {
        let fit = fit_regression(&synthetic((1.0, -0.01, 2.0)), Dependent::AreaB).unwrap();
        assert!((fit.w1 - 1.0).abs() < 1e-8);
        assert!((fit.w2 + 0.01).abs() < 1e-8);
        assert!((fit.w3 - 2.0).abs() < 1e-8);
        assert!((fit.adjusted_r2 - 1.0).abs() < 1e-12);
        assert!((fit.implied_alpha - 2.0).abs() < 1e-8);
        assert!((fit.implied_beta - 0.01).abs() < 1e-8);
    }

    #[test]
    fn swapped_dependent_is_reciprocal() {
        let s = synthetic((1.25, -0.01, 2.0));
        let fwd = fit_regression(&s, Dependent::AreaB).unwrap();
        let back = fit_regression(&s, Dependent::AreaA).unwrap();
        assert!((fwd.w1 * back.w1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conversion_rules() {
        let s = synthetic((1.0, -0.01, 2.0));
        let fit = fit_regression(&s, Dependent::AreaB).unwrap();
        let m = to_spread_model(&fit, &s).unwrap();
        let (alpha, beta) = m.affine_params().unwrap();
        assert!((alpha - 2.0).abs() < 1e-8 && (beta - 0.01).abs() < 1e-10);

        let s = synthetic((1.5, -0.01, 2.0));
        let fit = fit_regression(&s, Dependent::AreaB).unwrap();
        assert!(matches!(to_spread_model(&fit, &s), Err(Error::NotConvertible(_))));

        let s = synthetic((1.0, 0.01, 2.0));
        let fit = fit_regression(&s, Dependent::AreaB).unwrap();
        assert!(matches!(to_spread_model(&fit, &s), Err(Error::NotConvertible(_))));
    }

    #[test]
    fn regression_errors() {
        let s = synthetic((1.0, -0.01, 2.0));
        assert!(matches!(fit_regression(&s[..3], Dependent::AreaB), Err(Error::InsufficientData(_))));
        let flat: Vec<MarketSample> = (0..6).map(|h| sample(h, 30.0, 31.0 + h as f64, 100.0)).collect();
        assert_eq!(fit_regression(&flat, Dependent::AreaB).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn stats_examples() {
        let s = vec![sample(0, 0.0, 1.0, 0.0), sample(1, 0.0, -1.0, 0.0)];
        let st = spread_stats(&s).unwrap();
        assert_eq!((st.mean, st.abs_mean, st.std_dev, st.n_samples), (0.0, 1.0, 1.0, 2));
        assert!(spread_stats(&[]).is_err());
    }
}

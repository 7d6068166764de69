//! Inter-area price spread and the tie-optimization (TO) benchmark.
//!
//! The spread `P(Q)` is the importing-area LMP minus the exporting-area LMP as
//! a function of the interface flow `Q`. Two representations are supported: an
//! affine spread `alpha - beta * Q`, handled in closed form everywhere, and a
//! general concave decreasing spread given by caller-supplied callables for the
//! value and its first two derivatives.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance of the adaptive quadrature used for general welfare.
pub const WELFARE_QUADRATURE_TOL: f64 = 1e-9;
/// Relative width at which the TO root bisection stops.
pub const TO_BISECTION_REL_WIDTH: f64 = 1e-10;
/// Maximum number of bracket doublings when searching for the TO root.
pub const TO_MAX_DOUBLINGS: u32 = 200;
/// Default number of probe points used to validate a general spread.
pub const DEFAULT_PROBE_POINTS: usize = 64;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A general spread given by callables for `P`, `P'` and `P''`.
#[derive(Clone)]
pub struct GeneralConcave {
    value: ScalarFn,
    first: ScalarFn,
    second: ScalarFn,
}

impl fmt::Debug for GeneralConcave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralConcave").finish_non_exhaustive()
    }
}

/// Inter-area price spread, $/MWh as a function of MW.
#[derive(Debug, Clone)]
pub enum SpreadModel {
    Affine { alpha: f64, beta: f64 },
    General(GeneralConcave),
}

/// Tie-optimization benchmark: the schedule where the spread vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub q_to: f64,
    pub welfare_at_q_to: f64,
}

/// `count` evenly spaced points on `[0, q_hi]`, the default validation probe.
pub fn probe_grid(q_hi: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|k| q_hi * k as f64 / (count - 1) as f64)
        .collect()
}

impl SpreadModel {
    pub fn affine(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidModel(format!("alpha must be positive, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidModel(format!("beta must be positive, got {beta}")));
        }
        Ok(SpreadModel::Affine { alpha, beta })
    }

    /// Builds a general spread and spot-checks it on `probe`.
    ///
    /// The probe must contain `0` or points above it; the spread has to be
    /// positive at zero, strictly decreasing and concave at every probe point.
    pub fn general<F, D1, D2>(value: F, first: D1, second: D2, probe: &[f64]) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let model = SpreadModel::General(GeneralConcave {
            value: Arc::new(value),
            first: Arc::new(first),
            second: Arc::new(second),
        });
        model.validate_on(probe)?;
        Ok(model)
    }

    fn validate_on(&self, probe: &[f64]) -> Result<()> {
        let p0 = self.evaluate(0.0)?;
        if p0 <= 0.0 {
            return Err(Error::InvalidModel(format!("spread at zero must be positive, got {p0}")));
        }
        let mut points: Vec<f64> = probe.iter().copied().filter(|q| *q >= 0.0).collect();
        points.sort_by(|a, b| a.total_cmp(b));
        points.dedup();
        if points.len() < 2 {
            return Err(Error::InvalidModel("probe grid needs at least two points in q >= 0".into()));
        }
        let values = points
            .iter()
            .map(|&q| self.evaluate(q))
            .collect::<Result<Vec<_>>>()?;
        for (w, v) in points.windows(2).zip(values.windows(2)) {
            if v[1] >= v[0] {
                return Err(Error::InvalidModel(format!(
                    "spread is not strictly decreasing between q = {} and q = {}",
                    w[0], w[1]
                )));
            }
        }
        for &q in &points {
            let d1 = self.derivative(q)?;
            let d2 = self.second_derivative(q)?;
            if d1 > 0.0 {
                return Err(Error::InvalidModel(format!("positive slope {d1} at q = {q}")));
            }
            if d2 > 1e-12 * (1.0 + d1.abs()) {
                return Err(Error::InvalidModel(format!("positive curvature {d2} at q = {q}")));
            }
        }
        // chord check, independent of the derivative callables
        for i in 1..points.len() - 1 {
            let (q0, q1, q2) = (points[i - 1], points[i], points[i + 1]);
            let t = (q1 - q0) / (q2 - q0);
            let chord = (1.0 - t) * values[i - 1] + t * values[i + 1];
            if values[i] < chord - 1e-9 * (1.0 + chord.abs()) {
                return Err(Error::InvalidModel(format!("spread is not concave around q = {q1}")));
            }
        }
        Ok(())
    }

    /// Affine parameters, when the model is affine.
    pub fn affine_params(&self) -> Option<(f64, f64)> {
        match *self {
            SpreadModel::Affine { alpha, beta } => Some((alpha, beta)),
            SpreadModel::General(_) => None,
        }
    }

    /// Spread at `q`. Negative `q` is allowed; the affine formula extends.
    pub fn evaluate(&self, q: f64) -> Result<f64> {
        match self {
            SpreadModel::Affine { alpha, beta } => Ok(alpha - beta * q),
            SpreadModel::General(g) => finite(q, (g.value)(q)),
        }
    }

    pub fn derivative(&self, q: f64) -> Result<f64> {
        match self {
            SpreadModel::Affine { beta, .. } => Ok(-beta),
            SpreadModel::General(g) => finite(q, (g.first)(q)),
        }
    }

    pub fn second_derivative(&self, q: f64) -> Result<f64> {
        match self {
            SpreadModel::Affine { .. } => Ok(0.0),
            SpreadModel::General(g) => finite(q, (g.second)(q)),
        }
    }

    /// Welfare `W(q)`, the integral of the spread over `[0, q]`.
    pub fn welfare(&self, q: f64) -> Result<f64> {
        if q.is_nan() || q < 0.0 {
            return Err(Error::InvalidInput(format!("welfare needs q >= 0, got {q}")));
        }
        match *self {
            SpreadModel::Affine { alpha, beta } => Ok(alpha * q - 0.5 * beta * q * q),
            SpreadModel::General(_) => adaptive_simpson(|z| self.evaluate(z), 0.0, q, WELFARE_QUADRATURE_TOL),
        }
    }

    pub fn tie_optimization(&self) -> Result<Benchmark> {
        let q_to = match *self {
            SpreadModel::Affine { alpha, beta } => alpha / beta,
            SpreadModel::General(_) => self.general_root()?,
        };
        Ok(Benchmark {
            q_to,
            welfare_at_q_to: self.welfare(q_to)?,
        })
    }

    fn general_root(&self) -> Result<f64> {
        let mut hi = 1.0;
        let mut doublings = 0;
        while self.evaluate(hi)? > 0.0 {
            if doublings == TO_MAX_DOUBLINGS {
                return Err(Error::UnboundedDemand { doublings });
            }
            hi *= 2.0;
            doublings += 1;
        }
        let mut lo = if doublings == 0 { 0.0 } else { hi / 2.0 };
        let width = TO_BISECTION_REL_WIDTH * hi.max(1.0);
        while hi - lo > width {
            let mid = 0.5 * (lo + hi);
            let v = self.evaluate(mid)?;
            if v > 0.0 {
                lo = mid;
            } else if v < 0.0 {
                hi = mid;
            } else {
                return Ok(mid);
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Rescales an affine spread parameter-wise, e.g. to model a forecast error.
    pub fn perturbed(&self, alpha_factor: f64, beta_factor: f64) -> Result<Self> {
        match *self {
            SpreadModel::Affine { alpha, beta } => SpreadModel::affine(alpha * alpha_factor, beta * beta_factor),
            SpreadModel::General(_) => Err(Error::InvalidModel("perturbation is only defined for affine spreads".into())),
        }
    }
}

fn finite(q: f64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation {
            q,
            reason: format!("callable returned {v}"),
        })
    }
}

fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    fn recurse<F: Fn(f64) -> Result<f64>>(
        f: &F,
        (a, fa): (f64, f64),
        (m, fm): (f64, f64),
        (b, fb): (f64, f64),
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        Ok(recurse(f, (a, fa), (lm, flm), (m, fm), left, 0.5 * tol, depth - 1)?
            + recurse(f, (m, fm), (rm, frm), (b, fb), right, 0.5 * tol, depth - 1)?)
    }

    if b == a {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a)?, f(m)?, f(b)?);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, (a, fa), (m, fm), (b, fb), whole, tol, 48)
}

/// Spread of the 2018 NYISO/ISO-NE CTS interface used by the experiments.
///
/// The zero-spread schedule is 1493 MW; the slope is pinned so that the
/// five-bidder intermediate-liquidity roster (298, 223, 194, 149, 893) MW has
/// a pivotal equilibrium bid of 4882 $/h.
pub fn nyiso_isone_reference() -> SpreadModel {
    const Q_TO: f64 = 1493.0;
    const PIVOT_BID: f64 = 4882.0;
    const PIVOT_B: f64 = 893.0;
    const TOTAL_B: f64 = 1757.0;
    // pivot bid = beta * (B_m^2 - (sum B - Q_TO)^2) / 4
    let beta = 4.0 * PIVOT_BID / (PIVOT_B * PIVOT_B - (TOTAL_B - Q_TO).powi(2));
    SpreadModel::Affine {
        alpha: beta * Q_TO,
        beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrapped(alpha: f64, beta: f64) -> SpreadModel {
        SpreadModel::general(
            move |q| alpha - beta * q,
            move |_| -beta,
            |_| 0.0,
            &probe_grid(2.0 * alpha / beta, DEFAULT_PROBE_POINTS),
        )
        .unwrap()
    }

    #[test]
    fn affine_evaluation() {
        let m = SpreadModel::affine(10.0, 1.0).unwrap();
        assert_eq!(m.evaluate(0.0).unwrap(), 10.0);
        assert_eq!(m.evaluate(10.0).unwrap(), 0.0);
        assert_eq!(m.evaluate(7.5).unwrap(), 2.5);
        assert_eq!(m.evaluate(-2.0).unwrap(), 12.0);
    }

    #[test]
    fn affine_welfare() {
        let m = SpreadModel::affine(10.0, 1.0).unwrap();
        assert_eq!(m.welfare(10.0).unwrap(), 50.0);
        assert_eq!(m.welfare(0.0).unwrap(), 0.0);
        assert_eq!(m.welfare(7.5).unwrap(), 46.875);
        assert!(matches!(m.welfare(-1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn quadrature_matches_antiderivative() {
        let g = wrapped(10.0, 1.0);
        assert!((g.welfare(7.5).unwrap() - 46.875).abs() < 1e-9);
        let cubic = SpreadModel::general(
            |q| 10.0 - q * q * q,
            |q| -3.0 * q * q,
            |q| -6.0 * q,
            &probe_grid(3.0, 16),
        )
        .unwrap();
        // 10q - q^4/4 at q = 2
        assert!((cubic.welfare(2.0).unwrap() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn tie_optimization_examples() {
        let b = SpreadModel::affine(10.0, 1.0).unwrap().tie_optimization().unwrap();
        assert_eq!(b, Benchmark { q_to: 10.0, welfare_at_q_to: 50.0 });
        let b = SpreadModel::affine(20.0, 2.0).unwrap().tie_optimization().unwrap();
        assert_eq!(b, Benchmark { q_to: 10.0, welfare_at_q_to: 100.0 });
        let r = nyiso_isone_reference().tie_optimization().unwrap();
        assert!((r.q_to - 1493.0).abs() < 1e-9);
    }

    #[test]
    fn general_root_by_bisection() {
        let cubic = SpreadModel::general(
            |q| 10.0 - q * q * q,
            |q| -3.0 * q * q,
            |q| -6.0 * q,
            &probe_grid(3.0, 16),
        )
        .unwrap();
        let b = cubic.tie_optimization().unwrap();
        assert!((b.q_to - 10f64.cbrt()).abs() < 1e-9);
    }

    #[test]
    fn unbounded_demand_is_reported() {
        let never_zero = SpreadModel::general(|q| 1.0 - q * 1e-70, |_| -1e-70, |_| 0.0, &[0.0, 1e65]).unwrap();
        assert_eq!(
            never_zero.tie_optimization().unwrap_err(),
            Error::UnboundedDemand { doublings: TO_MAX_DOUBLINGS }
        );
    }

    #[test]
    fn construction_rejects_bad_models() {
        assert!(SpreadModel::affine(0.0, 1.0).is_err());
        assert!(SpreadModel::affine(1.0, -1.0).is_err());
        let increasing = SpreadModel::general(|q| 1.0 + q, |_| 1.0, |_| 0.0, &probe_grid(1.0, 8));
        assert!(matches!(increasing, Err(Error::InvalidModel(_))));
        let convex = SpreadModel::general(
            |q| (2.0 - q).powi(2),
            |q| -2.0 * (2.0 - q),
            |_| 2.0,
            &probe_grid(1.5, 8),
        );
        assert!(matches!(convex, Err(Error::InvalidModel(_))));
        let negative_at_zero = SpreadModel::general(|q| -1.0 - q, |_| -1.0, |_| 0.0, &probe_grid(1.0, 8));
        assert!(negative_at_zero.is_err());
    }

    #[test]
    fn callable_failure_propagates() {
        let m = SpreadModel::general(
            |q| if q > 5.0 { f64::NAN } else { 10.0 - q },
            |_| -1.0,
            |_| 0.0,
            &probe_grid(4.0, 8),
        )
        .unwrap();
        assert!(matches!(m.evaluate(6.0), Err(Error::Evaluation { .. })));
        assert!(m.tie_optimization().is_err());
    }

    #[test]
    fn wrapped_affine_agrees() {
        let (a, b) = (37.0, 0.3);
        let aff = SpreadModel::affine(a, b).unwrap();
        let gen = wrapped(a, b);
        for q in [0.0, 1.0, 50.0, 123.3] {
            assert!((aff.evaluate(q).unwrap() - gen.evaluate(q).unwrap()).abs() < 1e-9);
            assert!((aff.welfare(q).unwrap() - gen.welfare(q).unwrap()).abs() < 1e-9);
        }
        let (ta, tg) = (aff.tie_optimization().unwrap(), gen.tie_optimization().unwrap());
        assert!((ta.q_to - tg.q_to).abs() < 1e-9 * ta.q_to.max(1.0));
        assert!((ta.welfare_at_q_to - tg.welfare_at_q_to).abs() < 1e-9 * ta.welfare_at_q_to.max(1.0));
    }

    #[test]
    fn perturbation_scales_parameters() {
        let m = SpreadModel::affine(10.0, 2.0).unwrap().perturbed(1.1, 0.9).unwrap();
        let (a, b) = m.affine_params().unwrap();
        assert!((a - 11.0).abs() < 1e-12 && (b - 1.8).abs() < 1e-12);
    }
}

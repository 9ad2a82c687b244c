//! Single-compartment inversion-recovery magnitude model,
//! `S = m0 |1 - 2 exp(-TI / T1)|`, and its two-point inversion.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inversion time of the CSF-nulled acquisition (ms).
pub const CSFN_TI_MS: f64 = 1400.0;
/// Inversion time of the white-matter-nulled acquisition (ms).
pub const WMN_TI_MS: f64 = 400.0;

const T1_MIN: f64 = 1.0;
const T1_MAX: f64 = 1e5;
const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrSignalParams {
    pub m0: f64,
    /// Longitudinal relaxation time (ms).
    pub t1: f64,
    /// Inversion time (ms).
    pub ti: f64,
}

impl IrSignalParams {
    pub fn new(m0: f64, t1: f64, ti: f64) -> Result<Self> {
        let p = Self { m0, t1, ti };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m0", self.m0), ("t1", self.t1), ("ti", self.ti)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Signed longitudinal magnetization fraction `1 - 2 exp(-ti/t1)`.
#[inline]
fn recovery(t1: f64, ti: f64) -> f64 {
    1.0 - 2.0 * (-ti / t1).exp()
}

/// Magnitude signal of an inversion-recovery acquisition.
pub fn ir_signal(p: &IrSignalParams) -> Result<f64> {
    p.validate()?;
    Ok(p.m0 * recovery(p.t1, p.ti).abs())
}

/// The inversion time at which tissue with this T1 gives no signal.
pub fn null_point(t1: f64) -> f64 {
    t1 * LN_2
}

/// Which side of the null point each sample lies on, shorter TI first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignHypothesis {
    /// Both samples after the null point.
    BothPositive,
    /// The shorter TI before the null point, the longer one after it.
    Straddling,
    /// Both samples before the null point.
    BothNegative,
}

impl SignHypothesis {
    fn signs(self) -> (f64, f64) {
        match self {
            Self::BothPositive => (1.0, 1.0),
            Self::Straddling => (-1.0, 1.0),
            Self::BothNegative => (-1.0, -1.0),
        }
    }

    /// T1 interval on which the hypothesis is self-consistent.
    fn bracket(self, ti_short: f64, ti_long: f64) -> (f64, f64) {
        let (a, b) = (ti_short / LN_2, ti_long / LN_2);
        match self {
            Self::BothPositive => (T1_MIN, a.min(T1_MAX)),
            Self::Straddling => (a.max(T1_MIN), b.min(T1_MAX)),
            Self::BothNegative => (b.max(T1_MIN), T1_MAX),
        }
    }
}

/// Fitted equilibrium signal and T1 (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrFit {
    pub m0: f64,
    pub t1: f64,
    pub hypothesis: SignHypothesis,
}

impl IrFit {
    pub fn params_at(&self, ti: f64) -> Result<IrSignalParams> {
        IrSignalParams::new(self.m0, self.t1, ti)
    }
}

/// Recovers `(m0, t1)` from magnitude samples at two inversion times.
///
/// Magnitudes alone are ambiguous, so hypotheses are tried in the order
/// straddling, both-positive, both-negative: the shorter-TI sample is taken
/// to be pre-null whenever that yields a consistent fit.
pub fn estimate_ir_params(s1: f64, ti1: f64, s2: f64, ti2: f64) -> Result<IrFit> {
    for h in [
        SignHypothesis::Straddling,
        SignHypothesis::BothPositive,
        SignHypothesis::BothNegative,
    ] {
        match estimate_ir_params_with(s1, ti1, s2, ti2, h) {
            Ok(fit) => return Ok(fit),
            Err(e @ Error::InvalidArgument(_)) => return Err(e),
            Err(_) => {}
        }
    }
    Err(Error::FitFailure(format!(
        "no T1 in [{T1_MIN}, {T1_MAX}] ms reproduces signals {s1} at {ti1} ms and {s2} at {ti2} ms"
    )))
}

/// Two-point fit under a fixed sign hypothesis.
pub fn estimate_ir_params_with(
    s1: f64,
    ti1: f64,
    s2: f64,
    ti2: f64,
    hypothesis: SignHypothesis,
) -> Result<IrFit> {
    for (name, v) in [("ti1", ti1), ("ti2", ti2)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
    }
    if ti1 == ti2 {
        return Err(Error::invalid("inversion times must differ"));
    }
    if !(s1.is_finite() && s2.is_finite() && s1 >= 0.0 && s2 >= 0.0) {
        return Err(Error::invalid("signals must be finite and non-negative"));
    }
    if s1 == 0.0 && s2 == 0.0 {
        return Err(Error::FitFailure("both signals are zero".into()));
    }
    // order samples by inversion time
    let ((sa, ta), (sb, tb)) = if ti1 < ti2 {
        ((s1, ti1), (s2, ti2))
    } else {
        ((s2, ti2), (s1, ti1))
    };
    let (lo, hi) = hypothesis.bracket(ta, tb);
    if !(lo < hi) {
        return Err(Error::FitFailure(format!(
            "{hypothesis:?} has an empty T1 range"
        )));
    }
    let (sign_a, sign_b) = hypothesis.signs();
    let (ya, yb) = (sign_a * sa, sign_b * sb);

    let t1 = if sa == 0.0 {
        ta / LN_2
    } else if sb == 0.0 {
        tb / LN_2
    } else {
        // ya / yb = recovery(ta) / recovery(tb)
        let f = |t1: f64| ya * recovery(t1, tb) - yb * recovery(t1, ta);
        bisect(f, lo, hi)?
    };
    if !(lo..=hi).contains(&t1) {
        return Err(Error::FitFailure(format!(
            "{hypothesis:?}: null-point T1 outside range"
        )));
    }
    let (ra, rb) = (recovery(t1, ta), recovery(t1, tb));
    let m0 = (sa + sb) / (ra.abs() + rb.abs());
    let fit = IrFit { m0, t1, hypothesis };
    // forward check, including sign consistency
    let consistent = [(sa, ra, sign_a), (sb, rb, sign_b)]
        .iter()
        .all(|&(s, r, sign)| {
            let model = m0 * r.abs();
            let scale = sa.max(sb);
            (model - s).abs() <= 1e-9 * scale && (s == 0.0 || r * sign >= 0.0)
        });
    if !(m0.is_finite() && m0 > 0.0 && consistent) {
        return Err(Error::FitFailure(format!(
            "{hypothesis:?} does not reproduce the samples"
        )));
    }
    Ok(fit)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::FitFailure("no sign change in bracket".into()));
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

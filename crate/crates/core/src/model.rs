//! Domain types: equation of state, similarity exponents, solver state.
//!
//! Everything here is an immutable value type with no integration logic.
//! Exponents are kept as exact rationals so that exponent-table and
//! balance-relation tests can compare exactly instead of within a tolerance.

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive};
use thiserror::Error;

/// Exact rational with enough headroom for products of float-derived
/// rationals (f64 mantissas give denominators up to 2^52).
pub type Rational = Ratio<i128>;

/// Converts a finite `f64` to the exact rational it represents.
///
/// Returns `None` for non-finite input or when the value needs more than
/// i128 headroom (|exponent| beyond ~120 bits).
pub fn exact_rational(x: f64) -> Option<Rational> {
    if !x.is_finite() {
        return None;
    }
    if x == 0.0 {
        return Some(Rational::new(0, 1));
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 0 { 1i128 } else { -1i128 };
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if biased == 0 {
        (frac as i128, -1074i64)
    } else {
        ((frac | (1 << 52)) as i128, biased - 1075)
    };
    let mantissa = sign * mantissa;
    if exp >= 0 {
        if exp > 70 {
            return None;
        }
        Some(Rational::new(mantissa << exp, 1))
    } else {
        if exp < -120 {
            return None;
        }
        Some(Rational::new(mantissa, 1i128 << (-exp)))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("pressure scale A must be positive and finite, got {0}")]
    InvalidPressureScale(f64),
    #[error("Chaplygin exponent n must lie in (-1, 1], got {0}")]
    ExponentOutOfRange(f64),
    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),
    #[error("similarity variable eta must be positive and finite, got {0}")]
    InvalidEta(f64),
    #[error("time must be positive and finite, got {0}")]
    InvalidTime(f64),
    #[error("shape-function value must be finite")]
    NonFiniteShape,
}

/// Barotropic closure P(rho) = -A rho^(-n) with A > 0 and -1 < n <= 1.
///
/// The n = -1 endpoint is excluded at construction: the variant-I exponent
/// gamma = -1/(n+1) diverges there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaplyginEos {
    a: f64,
    n: f64,
}

impl ChaplyginEos {
    pub fn new(a: f64, n: f64) -> Result<Self, ModelError> {
        if !(a.is_finite() && a > 0.0) {
            return Err(ModelError::InvalidPressureScale(a));
        }
        if !(n.is_finite() && n > -1.0 && n <= 1.0) {
            return Err(ModelError::ExponentOutOfRange(n));
        }
        Ok(Self { a, n })
    }

    /// Pressure scale A (geometrical units).
    pub fn pressure_scale(&self) -> f64 {
        self.a
    }

    /// Polytropic-like exponent n.
    pub fn exponent(&self) -> f64 {
        self.n
    }

    /// P(rho) = -A rho^(-n). Always negative for rho > 0.
    pub fn pressure(&self, rho: f64) -> Result<f64, ModelError> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(ModelError::NonPositiveDensity(rho));
        }
        Ok(-self.a * rho.powf(-self.n))
    }
}

/// The three admissible exponent rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantId {
    I,
    II,
    III,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::I, VariantId::II, VariantId::III];
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VariantId::I => write!(f, "I"),
            VariantId::II => write!(f, "II"),
            VariantId::III => write!(f, "III"),
        }
    }
}

impl std::str::FromStr for VariantId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "I" | "i" | "1" => Ok(VariantId::I),
            "II" | "ii" | "2" => Ok(VariantId::II),
            "III" | "iii" | "3" => Ok(VariantId::III),
            other => Err(format!("unknown variant '{other}' (expected I, II or III)")),
        }
    }
}

/// Similarity exponents (alpha, beta, gamma, delta) for one variant, stored
/// as exact rationals. alpha + beta = 1 holds exactly for every row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityExponents {
    variant: VariantId,
    alpha: Rational,
    beta: Rational,
    gamma: Rational,
    delta: Rational,
}

impl SimilarityExponents {
    /// Exponent row for `variant` at Chaplygin exponent `n`.
    ///
    /// Only variant I depends on n (gamma = -1/(n+1)); the bound
    /// -1 < n <= 1 is enforced for every variant since it is the equation
    /// of state's own domain.
    pub fn for_variant(variant: VariantId, n: f64) -> Result<Self, ModelError> {
        if !(n.is_finite() && n > -1.0 && n <= 1.0) {
            return Err(ModelError::ExponentOutOfRange(n));
        }
        let n_exact = exact_rational(n).ok_or(ModelError::ExponentOutOfRange(n))?;
        let r = |num: i128, den: i128| Rational::new(num, den);
        let (alpha, beta, gamma, delta) = match variant {
            VariantId::I => {
                let gamma = -(Rational::new(1, 1) / (n_exact + Rational::new(1, 1)));
                (r(1, 2), r(1, 2), gamma, r(1, 1))
            }
            VariantId::II => (r(1, 1), r(0, 1), r(-1, 1), r(2, 1)),
            VariantId::III => (r(0, 1), r(1, 1), r(0, 1), r(0, 1)),
        };
        Ok(Self {
            variant,
            alpha,
            beta,
            gamma,
            delta,
        })
    }

    pub fn variant(&self) -> VariantId {
        self.variant
    }

    pub fn alpha(&self) -> f64 {
        ratio_to_f64(self.alpha)
    }

    pub fn beta(&self) -> f64 {
        ratio_to_f64(self.beta)
    }

    pub fn gamma(&self) -> f64 {
        ratio_to_f64(self.gamma)
    }

    pub fn delta(&self) -> f64 {
        ratio_to_f64(self.delta)
    }

    pub fn alpha_exact(&self) -> Rational {
        self.alpha
    }

    pub fn beta_exact(&self) -> Rational {
        self.beta
    }

    pub fn gamma_exact(&self) -> Rational {
        self.gamma
    }

    pub fn delta_exact(&self) -> Rational {
        self.delta
    }
}

pub(crate) fn ratio_to_f64(r: Rational) -> f64 {
    // i128 -> f64 is exact for the magnitudes produced here whenever the
    // reduced fraction is itself a dyadic rational; otherwise correctly rounded.
    r.numer().to_f64().unwrap() / r.denom().to_f64().unwrap()
}

/// Formats a rational as `p/q` (or just `p` when q = 1), with a decimal
/// rendering for float-derived denominators that would be unreadable.
pub fn display_rational(r: &Rational) -> String {
    if r.denom().abs() <= 10_000 {
        if *r.denom() == 1 {
            format!("{}", r.numer())
        } else {
            format!("{}/{}", r.numer(), r.denom())
        }
    } else {
        format!("{}", ratio_to_f64(*r))
    }
}

/// Point value of the reduced system at similarity variable eta.
///
/// q is the first derivative of the potential shape h, carried as state to
/// reduce the second-order potential equation to first order. The density
/// shape g must be positive whenever the state is fed to the reduced system;
/// that is enforced at the reduction boundary, not here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeState {
    pub eta: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub q: f64,
}

impl ShapeState {
    /// eta = 0 is a coordinate singularity of the reduced system, so eta
    /// must be strictly positive.
    pub fn new(eta: f64, f: f64, g: f64, h: f64, q: f64) -> Result<Self, ModelError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(ModelError::InvalidEta(eta));
        }
        if !(f.is_finite() && g.is_finite() && h.is_finite() && q.is_finite()) {
            return Err(ModelError::NonFiniteShape);
        }
        Ok(Self { eta, f, g, h, q })
    }
}

/// Physical fields reconstructed from shape functions at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalPoint {
    pub r: f64,
    pub u: f64,
    pub rho: f64,
    pub phi: f64,
}

impl ShapeState {
    /// Maps the shape state back to physical fields at time t > 0:
    /// r = eta t^beta, u = t^(-alpha) f, rho = t^(-gamma) g, phi = t^(-delta) h.
    pub fn reconstruct_fields(
        &self,
        exp: &SimilarityExponents,
        t: f64,
    ) -> Result<PhysicalPoint, ModelError> {
        if !(t.is_finite() && t > 0.0) {
            return Err(ModelError::InvalidTime(t));
        }
        Ok(PhysicalPoint {
            r: self.eta * t.powf(exp.beta()),
            u: t.powf(-exp.alpha()) * self.f,
            rho: t.powf(-exp.gamma()) * self.g,
            phi: t.powf(-exp.delta()) * self.h,
        })
    }
}

//! Right-hand side of the reduced shape-function ODE system.
//!
//! The continuity and momentum reductions couple f' and g' linearly, so a
//! single evaluation solves a 2x2 system; the potential reduction gives h''
//! explicitly. The 2x2 determinant vanishing is the critical (sonic) point
//! of the similarity flow and is surfaced as an error rather than crossed.
//!
//! Two momentum forms are provided. `AsPrinted` carries the extra -eta^2 f'
//! term and the eta factors on f f' and h'; `PdeDerived` is the direct
//! reduction of the momentum PDE under alpha + beta = 1. They genuinely
//! differ; residuals can be reported for both (see the verifier).

use crate::model::{ChaplyginEos, ShapeState, SimilarityExponents};
use std::f64::consts::PI;
use thiserror::Error;

/// Which momentum reduction closes the 2x2 system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentumForm {
    /// The equation with the -eta^2 f' term and eta factors on f f' and h'.
    #[default]
    AsPrinted,
    /// Direct reduction of the momentum PDE under alpha + beta = 1.
    PdeDerived,
}

impl std::fmt::Display for MomentumForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MomentumForm::AsPrinted => write!(f, "as_printed"),
            MomentumForm::PdeDerived => write!(f, "pde_derived"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("density shape g must be positive at eta={eta}, got g={g}")]
    NonPositiveDensity { eta: f64, g: f64 },
    #[error("critical point at eta={eta}: determinant {determinant:e}")]
    CriticalPoint { eta: f64, determinant: f64 },
}

/// The 2x2 system `matrix * (f', g')^T = rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSystem {
    pub matrix: [[f64; 2]; 2],
    pub rhs: [f64; 2],
}

impl LinearSystem {
    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }
}

/// Derivatives of the shape functions at one state, with the determinant of
/// the linear system that produced (f', g').
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeResult {
    pub f_prime: f64,
    pub g_prime: f64,
    /// q passed through; h' is state, not solved for.
    pub h_prime: f64,
    pub h_double_prime: f64,
    pub determinant: f64,
}

impl DerivativeResult {
    pub fn as_derivatives(&self) -> ShapeDerivatives {
        ShapeDerivatives {
            f_prime: self.f_prime,
            g_prime: self.g_prime,
            h_prime: self.h_prime,
            h_double_prime: self.h_double_prime,
        }
    }
}

/// A candidate derivative bundle, from any source (linear solve, finite
/// differences of a table, an interpolant slope), for defect evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeDerivatives {
    pub f_prime: f64,
    pub g_prime: f64,
    pub h_prime: f64,
    pub h_double_prime: f64,
}

/// Builds the 2x2 system for (f', g') at `state`.
///
/// Row 1 is the continuity reduction, row 2 the selected momentum form.
pub fn linear_system(
    state: &ShapeState,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    form: MomentumForm,
) -> Result<LinearSystem, ReductionError> {
    let ShapeState { eta, f, g, q, .. } = *state;
    if g <= 0.0 {
        return Err(ReductionError::NonPositiveDensity { eta, g });
    }
    let (alpha, beta) = (exp.alpha(), exp.beta());
    let (a, n) = (eos.pressure_scale(), eos.exponent());
    let pressure_coeff = n * a * g.powf(-(n + 2.0));
    let row1 = [g, f - beta * eta];
    let rhs1 = exp.gamma() * g - f * g / eta;
    let (row2, rhs2) = match form {
        MomentumForm::AsPrinted => (
            [eta * f - beta * eta - eta * eta, pressure_coeff],
            alpha * f - eta * q,
        ),
        MomentumForm::PdeDerived => ([f - beta * eta, pressure_coeff], alpha * f - q),
    };
    Ok(LinearSystem {
        matrix: [row1, row2],
        rhs: [rhs1, rhs2],
    })
}

/// Closed-form determinant of the 2x2 system, without building the matrix.
pub fn determinant_closed_form(
    state: &ShapeState,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    form: MomentumForm,
) -> Result<f64, ReductionError> {
    let ShapeState { eta, f, g, .. } = *state;
    if g <= 0.0 {
        return Err(ReductionError::NonPositiveDensity { eta, g });
    }
    let beta = exp.beta();
    let (a, n) = (eos.pressure_scale(), eos.exponent());
    let lead = n * a * g.powf(-(n + 1.0));
    Ok(match form {
        MomentumForm::AsPrinted => lead - (f - beta * eta) * (eta * f - beta * eta - eta * eta),
        MomentumForm::PdeDerived => {
            let d = f - beta * eta;
            lead - d * d
        }
    })
}

/// Solves the reduced system at `state`: (f', g') by Cramer's rule, h' = q,
/// h'' = (4 pi eta g - q) / eta.
///
/// Fails with `CriticalPoint` when |determinant| <= `singular_tolerance`.
pub fn derivatives(
    state: &ShapeState,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    form: MomentumForm,
    singular_tolerance: f64,
) -> Result<DerivativeResult, ReductionError> {
    let sys = linear_system(state, exp, eos, form)?;
    let det = sys.determinant();
    if det.abs() <= singular_tolerance || !det.is_finite() {
        return Err(ReductionError::CriticalPoint {
            eta: state.eta,
            determinant: det,
        });
    }
    let [b1, b2] = sys.rhs;
    let [[m11, m12], [m21, m22]] = sys.matrix;
    let f_prime = (b1 * m22 - b2 * m12) / det;
    let g_prime = (b2 * m11 - b1 * m21) / det;
    let h_double_prime = (4.0 * PI * state.eta * state.g - state.q) / state.eta;
    Ok(DerivativeResult {
        f_prime,
        g_prime,
        h_prime: state.q,
        h_double_prime,
        determinant: det,
    })
}

/// Defect (LHS - RHS) of each reduced equation for a candidate derivative
/// bundle, together with the largest term magnitude per equation for
/// relative-residual scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquationDefects {
    pub continuity: f64,
    pub momentum: f64,
    pub poisson: f64,
    pub continuity_scale: f64,
    pub momentum_scale: f64,
    pub poisson_scale: f64,
}

impl EquationDefects {
    pub fn defects(&self) -> [f64; 3] {
        [self.continuity, self.momentum, self.poisson]
    }

    pub fn scales(&self) -> [f64; 3] {
        [self.continuity_scale, self.momentum_scale, self.poisson_scale]
    }
}

fn max_abs(terms: &[f64]) -> f64 {
    terms.iter().fold(0.0f64, |m, t| m.max(t.abs()))
}

/// Substitutes `state` and `d` into both sides of the three reduced
/// equations (row 2 in the selected momentum form).
pub fn equation_defects(
    state: &ShapeState,
    d: &ShapeDerivatives,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    form: MomentumForm,
) -> EquationDefects {
    let ShapeState { eta, f, g, q: _, .. } = *state;
    let (alpha, beta, gamma) = (exp.alpha(), exp.beta(), exp.gamma());
    let (a, n) = (eos.pressure_scale(), eos.exponent());
    let press = n * a * g.powf(-(n + 2.0)) * d.g_prime;

    let c_terms = [
        d.f_prime * g,
        f * d.g_prime,
        f * g / eta,
        gamma * g,
        beta * eta * d.g_prime,
    ];
    let continuity = c_terms[0] + c_terms[1] + c_terms[2] - c_terms[3] - c_terms[4];

    let (momentum, m_terms) = match form {
        MomentumForm::AsPrinted => {
            let t = [
                -alpha * f,
                -beta * eta * d.f_prime,
                -eta * eta * d.f_prime,
                eta * d.f_prime * f,
                -press,
                -eta * d.h_prime,
            ];
            (t[0] + t[1] + t[2] + t[3] - t[4] - t[5], t)
        }
        MomentumForm::PdeDerived => {
            let t = [
                -alpha * f,
                -beta * eta * d.f_prime,
                f * d.f_prime,
                0.0,
                -press,
                -d.h_prime,
            ];
            (t[0] + t[1] + t[2] - t[4] - t[5], t)
        }
    };

    let p_terms = [d.h_prime, d.h_double_prime * eta, 4.0 * PI * eta * g];
    let poisson = p_terms[0] + p_terms[1] - p_terms[2];

    EquationDefects {
        continuity,
        momentum,
        poisson,
        continuity_scale: max_abs(&c_terms),
        momentum_scale: max_abs(&m_terms),
        poisson_scale: max_abs(&p_terms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantId;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn setup(variant: VariantId, n: f64, a: f64) -> (SimilarityExponents, ChaplyginEos) {
        (
            SimilarityExponents::for_variant(variant, n).unwrap(),
            ChaplyginEos::new(a, n).unwrap(),
        )
    }

    #[test]
    fn system_variant_iii_hand_values() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let s = ShapeState::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let sys = linear_system(&s, &exp, &eos, MomentumForm::AsPrinted).unwrap();
        assert_eq!(sys.matrix, [[1.0, -1.0], [-2.0, 1.0]]);
        assert_eq!(sys.rhs, [0.0, 0.0]);
        assert_eq!(sys.determinant(), -1.0);
    }

    #[test]
    fn pressure_column_vanishes_at_n_zero() {
        let (exp, eos) = setup(VariantId::III, 0.0, 1.0);
        let s = ShapeState::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let sys = linear_system(&s, &exp, &eos, MomentumForm::AsPrinted).unwrap();
        assert_eq!(sys.matrix[1][1], 0.0);
    }

    #[test]
    fn system_variant_ii_hand_values() {
        let (exp, eos) = setup(VariantId::II, 1.0, 1.0);
        let s = ShapeState::new(2.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let sys = linear_system(&s, &exp, &eos, MomentumForm::AsPrinted).unwrap();
        assert_eq!(sys.matrix, [[1.0, 0.0], [-4.0, 1.0]]);
        assert_eq!(sys.rhs, [-1.0, 0.0]);
    }

    #[test]
    fn derivatives_variant_iii_hand_values() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let s = ShapeState::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let d = derivatives(&s, &exp, &eos, MomentumForm::AsPrinted, 1e-10).unwrap();
        assert_eq!(d.f_prime, 0.0);
        assert_eq!(d.g_prime, 0.0);
        assert_eq!(d.h_prime, 0.0);
        assert_relative_eq!(d.h_double_prime, 4.0 * PI, max_relative = 1e-15);
        assert_eq!(d.determinant, -1.0);
    }

    #[test]
    fn critical_point_at_determinant_root() {
        // root of D(f) = 1 - (f-1)(f-2) at eta=1: f = (3 - sqrt(5))/2
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let f0 = (3.0 - 5.0_f64.sqrt()) / 2.0;
        let s = ShapeState::new(1.0, f0, 1.0, 0.0, 0.0).unwrap();
        let err = derivatives(&s, &exp, &eos, MomentumForm::AsPrinted, 1e-10).unwrap_err();
        match err {
            ReductionError::CriticalPoint { eta, determinant } => {
                assert_eq!(eta, 1.0);
                assert!(determinant.abs() <= 1e-10);
            }
            other => panic!("expected critical point, got {other:?}"),
        }
    }

    #[test]
    fn h_does_not_influence_derivatives() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let s0 = ShapeState::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let s7 = ShapeState::new(1.0, 0.0, 1.0, 7.0, 0.0).unwrap();
        let d0 = derivatives(&s0, &exp, &eos, MomentumForm::AsPrinted, 1e-10).unwrap();
        let d7 = derivatives(&s7, &exp, &eos, MomentumForm::AsPrinted, 1e-10).unwrap();
        assert_eq!(d0, d7);
    }

    #[test]
    fn nonpositive_density_rejected() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let s = ShapeState::new(1.0, 0.0, -0.5, 0.0, 0.0).unwrap();
        assert!(matches!(
            linear_system(&s, &exp, &eos, MomentumForm::AsPrinted),
            Err(ReductionError::NonPositiveDensity { .. })
        ));
    }

    fn arb_state() -> impl Strategy<Value = (f64, f64, f64, f64)> {
        (0.1f64..10.0, -2.0f64..2.0, 0.1f64..5.0, -5.0f64..5.0)
    }

    proptest! {
        #[test]
        fn back_substitution_residual(
            (eta, f, g, q) in arb_state(),
            n in -0.99f64..=1.0,
            a in 0.01f64..=5.0,
            variant_idx in 0usize..3,
            printed in proptest::bool::ANY,
        ) {
            let variant = VariantId::ALL[variant_idx];
            let form = if printed { MomentumForm::AsPrinted } else { MomentumForm::PdeDerived };
            let (exp, eos) = setup(variant, n, a);
            let s = ShapeState::new(eta, f, g, 0.0, q).unwrap();
            if let Ok(d) = derivatives(&s, &exp, &eos, form, 1e-10) {
                let defects = equation_defects(&s, &d.as_derivatives(), &exp, &eos, form);
                for (defect, scale) in defects.defects().into_iter().zip(defects.scales()) {
                    prop_assert!(defect.abs() <= 1e-12 * scale.max(1.0),
                        "defect {defect:e} vs scale {scale:e}");
                }
            }
        }

        #[test]
        fn closed_form_matches_matrix_determinant(
            (eta, f, g, q) in arb_state(),
            n in -0.99f64..=1.0,
            a in 0.01f64..=5.0,
            printed in proptest::bool::ANY,
        ) {
            let form = if printed { MomentumForm::AsPrinted } else { MomentumForm::PdeDerived };
            let (exp, eos) = setup(VariantId::I, n, a);
            let s = ShapeState::new(eta, f, g, 0.0, q).unwrap();
            let sys = linear_system(&s, &exp, &eos, form).unwrap();
            let closed = determinant_closed_form(&s, &exp, &eos, form).unwrap();
            let scale = sys.matrix.iter().flatten().fold(0.0f64, |m, &v| m.max(v.abs()));
            prop_assert!((sys.determinant() - closed).abs() <= 1e-14 * (scale * scale).max(1.0));
        }

        #[test]
        fn h_shift_invariance((eta, f, g, q) in arb_state(), c in -10.0f64..10.0) {
            let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
            let s0 = ShapeState::new(eta, f, g, 0.0, q).unwrap();
            let s1 = ShapeState::new(eta, f, g, c, q).unwrap();
            let d0 = derivatives(&s0, &exp, &eos, MomentumForm::AsPrinted, 1e-10);
            let d1 = derivatives(&s1, &exp, &eos, MomentumForm::AsPrinted, 1e-10);
            prop_assert_eq!(d0, d1);
        }
    }
}

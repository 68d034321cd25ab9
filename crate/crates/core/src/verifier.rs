//! Independent correctness checks for solution tables.
//!
//! Nothing here re-integrates. ODE residuals substitute finite-difference
//! derivative estimates of the table columns into the reduced equations;
//! PDE residuals reconstruct the physical fields on an (r, t) grid and apply
//! second-order central differences to the original equations; the balance
//! relations are checked in exact rational arithmetic.

use crate::integrator::{
    integrate, IntegrationConfig, Mode, Sampling, SetupError, SolutionTable, Termination,
};
use crate::model::{
    exact_rational, ChaplyginEos, Rational, ShapeState, SimilarityExponents,
};
use crate::reduction::{equation_defects, MomentumForm, ShapeDerivatives};
use num_traits::Zero;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error("residual check requires at least 3 rows with distinct eta, got {0}")]
    TooFewRows(usize),
    #[error("table rows must have strictly increasing eta")]
    NonMonotoneRows,
    #[error("table contains non-positive density shape g={g} at eta={eta}")]
    NonPositiveDensity { eta: f64, g: f64 },
    #[error("grid needs eta in [{needed_lo}, {needed_hi}], table spans [{have_lo}, {have_hi}]")]
    GridOutsideSpan {
        needed_lo: f64,
        needed_hi: f64,
        have_lo: f64,
        have_hi: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("empty table")]
    EmptyTable,
    #[error("Chaplygin exponent n must lie in (-1, 1], got {0}")]
    ExponentOutOfRange(f64),
    #[error("convergence level {level} terminated early: {termination}")]
    EarlyTermination { level: String, termination: String },
    #[error("convergence study setup failed: {0}")]
    Setup(#[from] SetupError),
}

/// Per-equation sup-norm residuals (continuity, momentum, Poisson), used
/// for both the reduced-ODE and the PDE checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquationResiduals {
    pub continuity: f64,
    pub momentum: f64,
    pub poisson: f64,
}

impl EquationResiduals {
    pub fn max(&self) -> f64 {
        self.continuity.max(self.momentum).max(self.poisson)
    }
}

/// Uniform (r, t) grid around a reference time for PDE residual checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub r_min: f64,
    pub r_max: f64,
    pub t_center: f64,
    pub spacing: f64,
}

impl GridSpec {
    pub fn new(r_min: f64, r_max: f64, t_center: f64, spacing: f64) -> Result<Self, VerifierError> {
        for (name, v) in [
            ("r_min", r_min),
            ("r_max", r_max),
            ("t_center", t_center),
            ("spacing", spacing),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(VerifierError::InvalidGrid(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if r_min >= r_max {
            return Err(VerifierError::InvalidGrid(format!(
                "r_min={r_min} must be below r_max={r_max}"
            )));
        }
        if spacing >= (r_max - r_min) / 4.0 {
            return Err(VerifierError::InvalidGrid(format!(
                "spacing={spacing} must be below (r_max - r_min)/4 = {}",
                (r_max - r_min) / 4.0
            )));
        }
        Ok(Self {
            r_min,
            r_max,
            t_center,
            spacing,
        })
    }
}

/// First-derivative finite-difference weights on arbitrary nodes at `x0`
/// (Fornberg's recursion, derivative order 1).
fn fd_weights_first(nodes: &[f64], x0: f64) -> Vec<f64> {
    let n = nodes.len();
    let m = 1usize;
    let mut c = vec![[0.0f64; 2]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[1]).collect()
}

fn validate_table_rows(table: &SolutionTable) -> Result<(), VerifierError> {
    if table.rows.len() < 3 {
        return Err(VerifierError::TooFewRows(table.rows.len()));
    }
    for w in table.rows.windows(2) {
        if w[1].eta <= w[0].eta {
            return Err(VerifierError::NonMonotoneRows);
        }
    }
    for r in &table.rows {
        if r.g <= 0.0 {
            return Err(VerifierError::NonPositiveDensity { eta: r.eta, g: r.g });
        }
    }
    Ok(())
}

/// Sup-norm defect of each reduced equation over the interior rows.
///
/// At each interior row, f', g' and h'' are estimated by finite differences
/// on the nearest (up to 5) rows, h' is the stored q column, and the
/// estimates are substituted into both sides of each equation via the
/// reduction module's defect forms.
pub fn ode_residuals(
    table: &SolutionTable,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    form: MomentumForm,
) -> Result<EquationResiduals, VerifierError> {
    validate_table_rows(table)?;
    let rows = &table.rows;
    let n = rows.len();
    let width = n.min(5);
    let etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let mut sup = [0.0f64; 3];
    for i in 1..n - 1 {
        let lo = i.saturating_sub(width / 2).min(n - width);
        let nodes = &etas[lo..lo + width];
        let w = fd_weights_first(nodes, etas[i]);
        let fd = |col: fn(&crate::integrator::SolutionRow) -> f64| -> f64 {
            w.iter()
                .zip(&rows[lo..lo + width])
                .map(|(wk, r)| wk * col(r))
                .sum()
        };
        let d = ShapeDerivatives {
            f_prime: fd(|r| r.f),
            g_prime: fd(|r| r.g),
            h_prime: rows[i].q,
            h_double_prime: fd(|r| r.q),
        };
        let state = ShapeState {
            eta: rows[i].eta,
            f: rows[i].f,
            g: rows[i].g,
            h: rows[i].h,
            q: rows[i].q,
        };
        let defects = equation_defects(&state, &d, exp, eos, form);
        for (s, defect) in sup.iter_mut().zip(defects.defects()) {
            *s = s.max(defect.abs());
        }
    }
    Ok(EquationResiduals {
        continuity: sup[0],
        momentum: sup[1],
        poisson: sup[2],
    })
}

/// Sup-norm finite-difference residuals of the original PDE system on the
/// given grid, with fields reconstructed from the table's dense output.
///
/// Second-order central differences on the interior; the momentum pressure
/// gradient is written as nA rho^(-n-2) d_r rho. Assertion-grade output
/// needs t_center = 1, where all time powers are unity; elsewhere the
/// numbers are diagnostic.
pub fn pde_residuals(
    table: &SolutionTable,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    grid: &GridSpec,
) -> Result<EquationResiduals, VerifierError> {
    let (have_lo, have_hi) = table.eta_span().ok_or(VerifierError::EmptyTable)?;
    let s = grid.spacing;
    let ts = [grid.t_center - s, grid.t_center, grid.t_center + s];
    if ts[0] <= 0.0 {
        return Err(VerifierError::InvalidGrid(format!(
            "t_center - spacing must stay positive, got {}",
            ts[0]
        )));
    }
    let beta = exp.beta();
    let mut needed_lo = f64::INFINITY;
    let mut needed_hi = f64::NEG_INFINITY;
    for &t in &ts {
        for r in [grid.r_min, grid.r_max] {
            let eta = r * t.powf(-beta);
            needed_lo = needed_lo.min(eta);
            needed_hi = needed_hi.max(eta);
        }
    }
    if needed_lo < have_lo || needed_hi > have_hi {
        return Err(VerifierError::GridOutsideSpan {
            needed_lo,
            needed_hi,
            have_lo,
            have_hi,
        });
    }

    let (alpha, gamma, delta) = (exp.alpha(), exp.gamma(), exp.delta());
    let (a, n_exp) = (eos.pressure_scale(), eos.exponent());
    let field = |r: f64, t: f64| -> [f64; 3] {
        let eta = r * t.powf(-beta);
        let v = table.sample(eta).expect("grid eta checked against span");
        [
            t.powf(-alpha) * v[0],
            t.powf(-gamma) * v[1],
            t.powf(-delta) * v[2],
        ]
    };

    let m = ((grid.r_max - grid.r_min) / s).floor() as usize + 1;
    let tc = grid.t_center;
    let mut sup = [0.0f64; 3];
    for i in 1..m.saturating_sub(1) {
        let r = grid.r_min + s * i as f64;
        let [u0, rho0, phi0] = field(r, tc);
        let [up, rhop, phip] = field(r + s, tc);
        let [um, rhom, phim] = field(r - s, tc);
        let [ut1, rhot1, _] = field(r, tc + s);
        let [ut0, rhot0, _] = field(r, tc - s);

        let drho_dt = (rhot1 - rhot0) / (2.0 * s);
        let du_dt = (ut1 - ut0) / (2.0 * s);
        let drho_dr = (rhop - rhom) / (2.0 * s);
        let du_dr = (up - um) / (2.0 * s);
        let dphi_dr = (phip - phim) / (2.0 * s);
        let d2phi_dr2 = (phip - 2.0 * phi0 + phim) / (s * s);

        let continuity = drho_dt + drho_dr * u0 + du_dr * rho0 + u0 * rho0 / r;
        // zero density with zero gradient carries no pressure force
        let pressure_grad = if drho_dr == 0.0 {
            0.0
        } else {
            n_exp * a * rho0.powf(-(n_exp + 2.0)) * drho_dr
        };
        let momentum = du_dt + u0 * du_dr + pressure_grad + dphi_dr;
        let poisson = d2phi_dr2 + dphi_dr / r - 4.0 * PI * rho0;

        sup[0] = sup[0].max(continuity.abs());
        sup[1] = sup[1].max(momentum.abs());
        sup[2] = sup[2].max(poisson.abs());
    }
    Ok(EquationResiduals {
        continuity: sup[0],
        momentum: sup[1],
        poisson: sup[2],
    })
}

/// The four power-matching relations among the similarity exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceRelation {
    /// alpha + beta = 1
    Continuity,
    /// gamma (n+1) + 2 alpha = 0
    Pressure,
    /// delta - 2 alpha = 0
    Gravity,
    /// delta + 2 beta - gamma = 0
    Poisson,
}

impl std::fmt::Display for BalanceRelation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BalanceRelation::Continuity => write!(f, "continuity"),
            BalanceRelation::Pressure => write!(f, "pressure"),
            BalanceRelation::Gravity => write!(f, "gravity"),
            BalanceRelation::Poisson => write!(f, "poisson"),
        }
    }
}

/// One balance relation's exact defect.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStatus {
    pub relation: BalanceRelation,
    pub defect: Rational,
    pub satisfied: bool,
}

/// Evaluates the four balance relations in exact rational arithmetic.
pub fn check_balance(
    exp: &SimilarityExponents,
    n: f64,
) -> Result<[BalanceStatus; 4], VerifierError> {
    if !(n.is_finite() && n > -1.0 && n <= 1.0) {
        return Err(VerifierError::ExponentOutOfRange(n));
    }
    let n_exact = exact_rational(n).ok_or(VerifierError::ExponentOutOfRange(n))?;
    let one = Rational::new(1, 1);
    let two = Rational::new(2, 1);
    let (alpha, beta, gamma, delta) = (
        exp.alpha_exact(),
        exp.beta_exact(),
        exp.gamma_exact(),
        exp.delta_exact(),
    );
    let defects = [
        (BalanceRelation::Continuity, alpha + beta - one),
        (BalanceRelation::Pressure, gamma * (n_exact + one) + two * alpha),
        (BalanceRelation::Gravity, delta - two * alpha),
        (BalanceRelation::Poisson, delta + two * beta - gamma),
    ];
    Ok(defects.map(|(relation, defect)| BalanceStatus {
        satisfied: defect.is_zero(),
        relation,
        defect,
    }))
}

/// Full verification record for one solution: ODE residuals, optional PDE
/// residuals with the grid that produced them, and the balance relations.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub ode: EquationResiduals,
    pub pde: Option<EquationResiduals>,
    pub balance: [BalanceStatus; 4],
    pub grid: Option<GridSpec>,
}

/// Estimates the observed convergence order of the configured scheme on
/// `problem` from endpoint errors against a tight adaptive reference.
///
/// Adaptive mode runs rtol in {1e-6, 1e-8, 1e-10} against an rtol=1e-12
/// reference, regressing endpoint error on mean accepted step. Euler mode
/// runs the configured step and its halvings {h, h/2, h/4}.
pub fn convergence_order(
    problem: &IntegrationConfig,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
) -> Result<f64, VerifierError> {
    let reference = run_level(problem, exp, eos, Mode::Adaptive45, Some(1e-12), "rtol=1e-12")?;
    let y_ref = endpoint(&reference);

    let mut log_h = Vec::new();
    let mut log_e = Vec::new();
    match problem.mode {
        Mode::Adaptive45 => {
            for rtol in [1e-6, 1e-8, 1e-10] {
                let label = format!("rtol={rtol:e}");
                let t = run_level(problem, exp, eos, Mode::Adaptive45, Some(rtol), &label)?;
                let steps = (t.rows.len() - 1).max(1) as f64;
                let span = problem.eta_end - problem.eta_start;
                let e = max_abs_diff(&endpoint(&t), &y_ref).max(1e-16);
                log_h.push((span / steps).ln());
                log_e.push(e.ln());
            }
        }
        Mode::FixedEuler { step } => {
            for div in [1.0, 2.0, 4.0] {
                let h = step / div;
                let label = format!("step={h:e}");
                let t = run_level(problem, exp, eos, Mode::FixedEuler { step: h }, None, &label)?;
                let e = max_abs_diff(&endpoint(&t), &y_ref).max(1e-16);
                log_h.push(h.ln());
                log_e.push(e.ln());
            }
        }
    }
    Ok(least_squares_slope(&log_h, &log_e))
}

fn run_level(
    problem: &IntegrationConfig,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
    mode: Mode,
    rtol: Option<f64>,
    label: &str,
) -> Result<SolutionTable, VerifierError> {
    let mut config = problem.clone();
    config.mode = mode;
    if let Some(rt) = rtol {
        config.rtol = rt;
    }
    config.sampling = Sampling::Accepted;
    if let Mode::FixedEuler { .. } = mode {
        // keep Euler tables lean: only the endpoint matters here
        config.sampling = Sampling::Points(Vec::new());
    }
    let table = integrate(&config, exp, eos)?;
    if table.termination != Termination::ReachedEnd {
        return Err(VerifierError::EarlyTermination {
            level: label.to_string(),
            termination: table.termination.to_string(),
        });
    }
    Ok(table)
}

fn endpoint(table: &SolutionTable) -> [f64; 4] {
    let r = table.rows.last().expect("non-empty table");
    [r.f, r.g, r.h, r.q]
}

fn max_abs_diff(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

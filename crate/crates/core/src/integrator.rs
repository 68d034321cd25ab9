//! Integration of the reduced system over the similarity variable.
//!
//! The primary scheme is the Dormand-Prince embedded 5(4) pair with standard
//! PI step control. Each accepted step additionally takes a half-step to the
//! interval midpoint, so dense output is a quintic Hermite interpolant
//! matching value and slope at both endpoints and the midpoint; its defect is
//! well below the step's error-control level everywhere in the interval.
//!
//! A fixed-step first-order Euler mode provides an independent oracle for
//! cross-validation.
//!
//! In-flight trouble (critical point, density floor, step-size underflow) is
//! recorded as a termination cause, never raised as an error. Transversal
//! determinant sign changes are refined by bisection to 1e-10 in eta. Folds,
//! where the determinant tends to zero without changing sign and the step
//! size collapses, are classified as critical points when the last
//! determinant is negligible against its own term scale.

use crate::model::{ChaplyginEos, ShapeState, SimilarityExponents};
use crate::reduction::{self, MomentumForm, ReductionError};
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Embedded Dormand-Prince 5(4) pair with PI step control.
    Adaptive45,
    /// Fixed-step explicit Euler (first-order oracle).
    FixedEuler { step: f64 },
}

/// Row-emission policy. Accepted steps are always emitted; the dense
/// policies add interpolated rows between them.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Rows at accepted steps only.
    Accepted,
    /// Consecutive rows no farther apart than min(rel * eta, cap).
    Dense { rel: f64, cap: f64 },
    /// Rows at the given eta values (within the integrated span), plus
    /// accepted steps.
    Points(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationConfig {
    pub eta_start: f64,
    pub eta_end: f64,
    pub f0: f64,
    pub g0: f64,
    pub h0: f64,
    pub q0: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: u64,
    pub min_step: f64,
    pub mode: Mode,
    pub momentum_form: MomentumForm,
    pub singular_tolerance: f64,
    pub g_floor: f64,
    pub sampling: Sampling,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            eta_start: 1e-3,
            eta_end: 5.0,
            f0: 0.0,
            g0: 1.0,
            h0: 0.0,
            q0: 0.0,
            rtol: 1e-8,
            atol: 1e-12,
            max_steps: 1_000_000,
            min_step: 1e-12,
            mode: Mode::Adaptive45,
            momentum_form: MomentumForm::AsPrinted,
            singular_tolerance: 1e-10,
            g_floor: 1e-12,
            sampling: Sampling::Accepted,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetupError {
    #[error("eta range must satisfy 0 < eta_start < eta_end, got [{start}, {end}]")]
    BadEtaRange { start: f64, end: f64 },
    #[error("{name} must be positive and finite, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("initial density g0={g0} must exceed g_floor={floor}")]
    InitialDensityBelowFloor { g0: f64, floor: f64 },
    #[error("initial shape values must be finite")]
    NonFiniteInitial,
    #[error("non-finite derivative at the initial point eta={eta}")]
    NonFiniteInitialDerivative { eta: f64 },
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<(), SetupError> {
        let positive = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(SetupError::NonPositiveParameter { name, value })
            }
        };
        positive("eta_start", self.eta_start)?;
        positive("eta_end", self.eta_end)?;
        if self.eta_start >= self.eta_end {
            return Err(SetupError::BadEtaRange {
                start: self.eta_start,
                end: self.eta_end,
            });
        }
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        positive("min_step", self.min_step)?;
        positive("singular_tolerance", self.singular_tolerance)?;
        positive("g_floor", self.g_floor)?;
        if self.max_steps == 0 {
            return Err(SetupError::NonPositiveParameter {
                name: "max_steps",
                value: 0.0,
            });
        }
        if let Mode::FixedEuler { step } = self.mode {
            positive("euler step", step)?;
        }
        match &self.sampling {
            Sampling::Accepted => {}
            Sampling::Dense { rel, cap } => {
                positive("sampling rel", *rel)?;
                positive("sampling cap", *cap)?;
            }
            Sampling::Points(pts) => {
                for &p in pts {
                    positive("sampling point", p)?;
                }
            }
        }
        if !(self.f0.is_finite() && self.g0.is_finite() && self.h0.is_finite() && self.q0.is_finite())
        {
            return Err(SetupError::NonFiniteInitial);
        }
        if self.g0 <= self.g_floor {
            return Err(SetupError::InitialDensityBelowFloor {
                g0: self.g0,
                floor: self.g_floor,
            });
        }
        Ok(())
    }
}

/// Why an integration stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    ReachedEnd,
    CriticalPoint { eta: f64 },
    DensityFloor { eta: f64 },
    StepUnderflow { eta: f64 },
    MaxSteps,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::ReachedEnd => write!(f, "reached_end"),
            Termination::CriticalPoint { eta } => write!(f, "critical_point at eta={eta}"),
            Termination::DensityFloor { eta } => write!(f, "density_floor at eta={eta}"),
            Termination::StepUnderflow { eta } => write!(f, "step_underflow at eta={eta}"),
            Termination::MaxSteps => write!(f, "max_steps"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolutionRow {
    pub eta: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub q: f64,
    pub determinant: f64,
}

/// Quintic Hermite dense-output segment for one accepted step: value and
/// slope matched at both endpoints and the midpoint, stored in Newton form.
#[derive(Debug, Clone)]
struct Segment {
    eta0: f64,
    eta1: f64,
    nodes: [f64; 6],
    coef: [[f64; 6]; 4],
}

impl Segment {
    fn build(
        eta0: f64,
        eta1: f64,
        y0: &[f64; 4],
        d0: &[f64; 4],
        ym: &[f64; 4],
        dm: &[f64; 4],
        y1: &[f64; 4],
        d1: &[f64; 4],
    ) -> Self {
        let em = 0.5 * (eta0 + eta1);
        let nodes = [eta0, eta0, em, em, eta1, eta1];
        let mut coef = [[0.0; 6]; 4];
        for c in 0..4 {
            let v = [y0[c], y0[c], ym[c], ym[c], y1[c], y1[c]];
            let slopes = [d0[c], dm[c], d1[c]];
            coef[c] = hermite_newton_coefficients(&nodes, &v, &slopes);
        }
        Segment {
            eta0,
            eta1,
            nodes,
            coef,
        }
    }

    fn eval(&self, eta: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for c in 0..4 {
            let mut p = self.coef[c][5];
            for k in (0..5).rev() {
                p = p * (eta - self.nodes[k]) + self.coef[c][k];
            }
            out[c] = p;
        }
        out
    }

    fn eval_with_slope(&self, eta: f64) -> ([f64; 4], [f64; 4]) {
        let mut val = [0.0; 4];
        let mut slope = [0.0; 4];
        for c in 0..4 {
            let mut p = self.coef[c][5];
            let mut dp = 0.0;
            for k in (0..5).rev() {
                dp = dp * (eta - self.nodes[k]) + p;
                p = p * (eta - self.nodes[k]) + self.coef[c][k];
            }
            val[c] = p;
            slope[c] = dp;
        }
        (val, slope)
    }
}

/// Newton divided-difference coefficients for Hermite data on duplicated
/// nodes (pairs). `slopes` holds the derivative at each distinct node.
fn hermite_newton_coefficients(nodes: &[f64; 6], values: &[f64; 6], slopes: &[f64; 3]) -> [f64; 6] {
    let mut dd = [[0.0f64; 6]; 6];
    for i in 0..6 {
        dd[i][0] = values[i];
    }
    for j in 1..6 {
        for i in 0..6 - j {
            if nodes[i + j] == nodes[i] {
                // duplicated node pair: first divided difference is the slope
                dd[i][j] = slopes[i / 2];
            } else {
                dd[i][j] = (dd[i + 1][j - 1] - dd[i][j - 1]) / (nodes[i + j] - nodes[i]);
            }
        }
    }
    let mut c = [0.0; 6];
    for (k, ck) in c.iter_mut().enumerate() {
        *ck = dd[0][k];
    }
    c
}

/// Dense sampled trajectory with its termination cause and the config that
/// produced it.
#[derive(Debug, Clone)]
pub struct SolutionTable {
    pub rows: Vec<SolutionRow>,
    pub termination: Termination,
    pub config: IntegrationConfig,
    segments: Vec<Segment>,
}

impl SolutionTable {
    /// Builds a table from bare rows (hand-built data, CSV round trips).
    /// Such a table has no dense output; sampling falls back to linear
    /// interpolation between rows.
    pub fn from_rows(
        rows: Vec<SolutionRow>,
        termination: Termination,
        config: IntegrationConfig,
    ) -> Self {
        Self {
            rows,
            termination,
            config,
            segments: Vec::new(),
        }
    }

    pub fn eta_span(&self) -> Option<(f64, f64)> {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => Some((a.eta, b.eta)),
            _ => None,
        }
    }

    pub fn has_dense_output(&self) -> bool {
        !self.segments.is_empty()
    }

    /// Shape-function values [f, g, h, q] at `eta`, from the stored dense
    /// output when available, else linear interpolation between rows.
    /// Returns `None` outside the table's span.
    pub fn sample(&self, eta: f64) -> Option<[f64; 4]> {
        self.sample_with_slope(eta).map(|(v, _)| v)
    }

    /// Value and interpolant slope at `eta`.
    pub fn sample_with_slope(&self, eta: f64) -> Option<([f64; 4], [f64; 4])> {
        let (lo, hi) = self.eta_span()?;
        if eta < lo || eta > hi {
            return None;
        }
        if !self.segments.is_empty() {
            let idx = match self
                .segments
                .binary_search_by(|s| s.eta1.partial_cmp(&eta).unwrap())
            {
                Ok(i) => i,
                Err(i) => i.min(self.segments.len() - 1),
            };
            let seg = &self.segments[idx];
            if eta >= seg.eta0 - 1e-12 && eta <= seg.eta1 + 1e-12 {
                return Some(seg.eval_with_slope(eta));
            }
            // eta precedes the first segment (between initial row and the
            // start of stepping); fall through to linear interpolation.
        }
        let rows = &self.rows;
        if rows.len() == 1 {
            let r = rows[0];
            return Some(([r.f, r.g, r.h, r.q], [0.0; 4]));
        }
        let i = match rows.binary_search_by(|r| r.eta.partial_cmp(&eta).unwrap()) {
            Ok(i) => return Some(([rows[i].f, rows[i].g, rows[i].h, rows[i].q], [0.0; 4])),
            Err(i) => i.clamp(1, rows.len() - 1),
        };
        let (a, b) = (rows[i - 1], rows[i]);
        let w = (eta - a.eta) / (b.eta - a.eta);
        let lerp = |x: f64, y: f64| x + w * (y - x);
        let slope = |x: f64, y: f64| (y - x) / (b.eta - a.eta);
        Some((
            [
                lerp(a.f, b.f),
                lerp(a.g, b.g),
                lerp(a.h, b.h),
                lerp(a.q, b.q),
            ],
            [
                slope(a.f, b.f),
                slope(a.g, b.g),
                slope(a.h, b.h),
                slope(a.q, b.q),
            ],
        ))
    }

    /// Accepted-step interval boundaries of the dense output.
    pub fn step_intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.segments.iter().map(|s| (s.eta0, s.eta1))
    }
}

/// Expansion/collapse verdict for a solution table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Expansion,
    Collapse,
    Indeterminate,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Classification::Expansion => write!(f, "expansion"),
            Classification::Collapse => write!(f, "collapse"),
            Classification::Indeterminate => write!(f, "indeterminate"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("classification requires at least 2 rows, got {0}")]
    TooFewRows(usize),
}

/// Collapse if the velocity shape drops below -atol anywhere past the first
/// row; expansion if it never does and the run reached its end; otherwise
/// indeterminate (early termination without a sign change).
pub fn classify(table: &SolutionTable) -> Result<Classification, ClassifyError> {
    if table.rows.len() < 2 {
        return Err(ClassifyError::TooFewRows(table.rows.len()));
    }
    let threshold = -table.config.atol;
    let went_negative = table.rows[1..].iter().any(|r| r.f < threshold);
    Ok(if went_negative {
        Classification::Collapse
    } else if table.termination == Termination::ReachedEnd {
        Classification::Expansion
    } else {
        Classification::Indeterminate
    })
}

// ---------------------------------------------------------------------------
// right-hand side with in-flight event reporting

#[derive(Debug, Clone, Copy, PartialEq)]
enum StopCause {
    CriticalPoint { eta: f64, determinant: f64 },
    DensityFloor { eta: f64 },
    NonFinite { eta: f64 },
}

struct RhsCtx<'a> {
    exp: &'a SimilarityExponents,
    eos: &'a ChaplyginEos,
    form: MomentumForm,
    singular_tolerance: f64,
    g_floor: f64,
}

impl RhsCtx<'_> {
    /// Derivative [f', g', h', q'] and determinant at (eta, y).
    fn eval(&self, eta: f64, y: &[f64; 4]) -> Result<([f64; 4], f64), StopCause> {
        let [f, g, h, q] = *y;
        if !(g.is_finite() && f.is_finite() && q.is_finite()) {
            return Err(StopCause::NonFinite { eta });
        }
        if g <= self.g_floor {
            return Err(StopCause::DensityFloor { eta });
        }
        let state = ShapeState { eta, f, g, h, q };
        match reduction::derivatives(&state, self.exp, self.eos, self.form, self.singular_tolerance)
        {
            Ok(d) => {
                let dy = [d.f_prime, d.g_prime, d.h_prime, d.h_double_prime];
                if dy.iter().any(|v| !v.is_finite()) {
                    return Err(StopCause::NonFinite { eta });
                }
                Ok((dy, d.determinant))
            }
            Err(ReductionError::CriticalPoint { eta, determinant }) => {
                Err(StopCause::CriticalPoint { eta, determinant })
            }
            Err(ReductionError::NonPositiveDensity { eta, .. }) => {
                Err(StopCause::DensityFloor { eta })
            }
        }
    }

    fn determinant_of(&self, eta: f64, y: &[f64; 4]) -> Option<f64> {
        let state = ShapeState {
            eta,
            f: y[0],
            g: y[1],
            h: y[2],
            q: y[3],
        };
        reduction::determinant_closed_form(&state, self.exp, self.eos, self.form).ok()
    }

    /// Term scale of the determinant, for relative near-singularity tests.
    fn determinant_scale(&self, eta: f64, y: &[f64; 4]) -> f64 {
        let [f, g, ..] = *y;
        if g <= 0.0 {
            return 1.0;
        }
        let beta = self.exp.beta();
        let (a, n) = (self.eos.pressure_scale(), self.eos.exponent());
        let lead = (n * a * g.powf(-(n + 1.0))).abs();
        let cross = match self.form {
            MomentumForm::AsPrinted => {
                ((f - beta * eta) * (eta * f - beta * eta - eta * eta)).abs()
            }
            MomentumForm::PdeDerived => (f - beta * eta) * (f - beta * eta),
        };
        (lead + cross).max(f64::MIN_POSITIVE)
    }
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4) pair

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct StepOut {
    y1: [f64; 4],
    /// FSAL stage: derivative at (eta + h, y1).
    k7: [f64; 4],
    det1: f64,
    /// Per-component error estimate (unnormalized).
    err: [f64; 4],
}

fn dp45_step(
    ctx: &RhsCtx<'_>,
    eta: f64,
    y: &[f64; 4],
    h: f64,
    k1: &[f64; 4],
) -> Result<StepOut, StopCause> {
    let at = |coeffs: &[(f64, &[f64; 4])]| {
        let mut out = *y;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, k) in coeffs {
                acc += c * k[i];
            }
            *o += h * acc;
        }
        out
    };
    let (k2, _) = ctx.eval(eta + C2 * h, &at(&[(A21, k1)]))?;
    let (k3, _) = ctx.eval(eta + C3 * h, &at(&[(A31, k1), (A32, &k2)]))?;
    let (k4, _) = ctx.eval(eta + C4 * h, &at(&[(A41, k1), (A42, &k2), (A43, &k3)]))?;
    let (k5, _) = ctx.eval(
        eta + C5 * h,
        &at(&[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
    )?;
    let (k6, _) = ctx.eval(
        eta + h,
        &at(&[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    )?;
    let y1 = at(&[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let (k7, det1) = ctx.eval(eta + h, &y1)?;
    let mut err = [0.0; 4];
    for i in 0..4 {
        err[i] =
            h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }
    Ok(StepOut { y1, k7, det1, err })
}

fn error_norm(err: &[f64; 4], y0: &[f64; 4], y1: &[f64; 4], rtol: f64, atol: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let scale = atol + rtol * y0[i].abs().max(y1[i].abs());
        let r = err[i] / scale;
        acc += r * r;
    }
    (acc / 4.0).sqrt()
}

// ---------------------------------------------------------------------------
// row emission

struct Emitter<'a> {
    sampling: &'a Sampling,
    points: Vec<f64>,
    next_point: usize,
    rows: Vec<SolutionRow>,
}

impl<'a> Emitter<'a> {
    fn new(sampling: &'a Sampling) -> Self {
        let mut points = match sampling {
            Sampling::Points(p) => p.clone(),
            _ => Vec::new(),
        };
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        Emitter {
            sampling,
            points,
            next_point: 0,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, ctx: &RhsCtx<'_>, eta: f64, y: &[f64; 4]) {
        if let Some(last) = self.rows.last() {
            if eta <= last.eta {
                return;
            }
        }
        let determinant = ctx.determinant_of(eta, y).unwrap_or(f64::NAN);
        self.rows.push(SolutionRow {
            eta,
            f: y[0],
            g: y[1],
            h: y[2],
            q: y[3],
            determinant,
        });
    }

    /// Emits interpolated rows strictly inside (from, to) per the sampling
    /// policy, then the endpoint itself if `include_end`.
    fn emit_interval<F>(
        &mut self,
        ctx: &RhsCtx<'_>,
        from: f64,
        to: f64,
        include_end: bool,
        sample: F,
    ) where
        F: Fn(f64) -> [f64; 4],
    {
        let eps = 1e-12 * to.abs().max(1.0);
        match self.sampling {
            Sampling::Accepted => {}
            Sampling::Dense { rel, cap } => {
                let mut last = self.rows.last().map(|r| r.eta).unwrap_or(from);
                loop {
                    let next = last + (rel * last).min(*cap);
                    if next >= to - eps {
                        break;
                    }
                    self.push(ctx, next, &sample(next));
                    last = next;
                }
            }
            Sampling::Points(_) => {
                while self.next_point < self.points.len() {
                    let p = self.points[self.next_point];
                    if p >= to - eps {
                        break;
                    }
                    if p > from + eps {
                        self.push(ctx, p, &sample(p));
                    }
                    self.next_point += 1;
                }
            }
        }
        if include_end {
            self.push(ctx, to, &sample(to));
        }
    }
}

// ---------------------------------------------------------------------------
// driver

/// Integrates the reduced system per `config`. Errors only at setup;
/// in-flight events become termination causes.
pub fn integrate(
    config: &IntegrationConfig,
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
) -> Result<SolutionTable, SetupError> {
    config.validate()?;
    let ctx = RhsCtx {
        exp,
        eos,
        form: config.momentum_form,
        singular_tolerance: config.singular_tolerance,
        g_floor: config.g_floor,
    };
    let y0 = [config.f0, config.g0, config.h0, config.q0];
    let mut emitter = Emitter::new(&config.sampling);
    emitter.push(&ctx, config.eta_start, &y0);

    let (d0, _) = match ctx.eval(config.eta_start, &y0) {
        Ok(v) => v,
        Err(StopCause::CriticalPoint { .. }) => {
            return Ok(SolutionTable {
                rows: emitter.rows,
                termination: Termination::CriticalPoint {
                    eta: config.eta_start,
                },
                config: config.clone(),
                segments: Vec::new(),
            });
        }
        Err(StopCause::DensityFloor { .. }) => {
            return Ok(SolutionTable {
                rows: emitter.rows,
                termination: Termination::DensityFloor {
                    eta: config.eta_start,
                },
                config: config.clone(),
                segments: Vec::new(),
            });
        }
        Err(StopCause::NonFinite { eta }) => {
            return Err(SetupError::NonFiniteInitialDerivative { eta });
        }
    };

    match config.mode {
        Mode::Adaptive45 => Ok(run_adaptive(config, &ctx, y0, d0, emitter)),
        Mode::FixedEuler { step } => Ok(run_euler(config, &ctx, y0, d0, step, emitter)),
    }
}

fn stop_cause_termination(cause: StopCause, fallback_eta: f64) -> Termination {
    match cause {
        StopCause::CriticalPoint { .. } => Termination::CriticalPoint { eta: fallback_eta },
        StopCause::DensityFloor { .. } => Termination::DensityFloor { eta: fallback_eta },
        StopCause::NonFinite { .. } => Termination::StepUnderflow { eta: fallback_eta },
    }
}

fn run_adaptive(
    config: &IntegrationConfig,
    ctx: &RhsCtx<'_>,
    mut y: [f64; 4],
    mut d: [f64; 4],
    mut emitter: Emitter<'_>,
) -> SolutionTable {
    const SAFETY: f64 = 0.9;
    const MIN_FACTOR: f64 = 0.2;
    const MAX_FACTOR: f64 = 5.0;
    // PI exponents for a 5th-order pair (Hairer's dopri5 defaults).
    const K_ALPHA: f64 = 0.17;
    const K_BETA: f64 = 0.04;

    let mut eta = config.eta_start;
    let span = config.eta_end - config.eta_start;
    let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut h = (1e-3 * span).min(1e-2 / (1.0 + d_norm)).max(config.min_step);
    let mut det_here = ctx
        .determinant_of(eta, &y)
        .unwrap_or(f64::NAN);
    let mut err_prev: f64 = 1.0;
    let mut rejected_last = false;
    let mut attempts: u64 = 0;
    let mut segments: Vec<Segment> = Vec::new();

    let termination = 'outer: loop {
        if eta >= config.eta_end {
            break Termination::ReachedEnd;
        }
        if attempts >= config.max_steps {
            break Termination::MaxSteps;
        }
        attempts += 1;
        h = h.min(config.eta_end - eta);

        // step attempt, with in-flight event handling
        let out = match dp45_step(ctx, eta, &y, h, &d) {
            Ok(out) => out,
            Err(cause) => {
                h *= 0.5;
                if h < config.min_step {
                    break stop_cause_termination(cause, eta);
                }
                continue;
            }
        };
        let err = error_norm(&out.err, &y, &out.y1, config.rtol, config.atol);
        if !err.is_finite() || err > 1.0 {
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-K_ALPHA)).clamp(MIN_FACTOR, 1.0)
            } else {
                MIN_FACTOR
            };
            h *= fac;
            rejected_last = true;
            if h < config.min_step {
                // repeated rejection without an identified event: a fold
                // (determinant sinking to zero) or genuine stiffness
                let scale = ctx.determinant_scale(eta, &y);
                break if det_here.is_finite() && det_here.abs() <= 1e-6 * scale {
                    Termination::CriticalPoint { eta }
                } else {
                    Termination::StepUnderflow { eta }
                };
            }
            continue;
        }

        // midpoint half-step for the quintic dense output
        let eta1 = eta + h;
        let half = match dp45_step(ctx, eta, &y, 0.5 * h, &d) {
            Ok(half) => half,
            Err(cause) => {
                h *= 0.5;
                if h < config.min_step {
                    break stop_cause_termination(cause, eta);
                }
                rejected_last = true;
                continue;
            }
        };
        let seg = Segment::build(eta, eta1, &y, &d, &half.y1, &half.k7, &out.y1, &out.k7);

        // transversal critical point: determinant sign change across the step
        if det_here.is_finite()
            && out.det1.is_finite()
            && det_here != 0.0
            && det_here.signum() != out.det1.signum()
        {
            let eta_star = bisect_on_segment(ctx, &seg, eta, eta1, |d| {
                d.signum() != det_here.signum()
            });
            emitter.emit_interval(ctx, eta, eta_star, false, |e| seg.eval(e));
            segments.push(seg);
            break 'outer Termination::CriticalPoint { eta: eta_star };
        }

        emitter.emit_interval(ctx, eta, eta1, true, |e| seg.eval(e));
        segments.push(seg);
        y = out.y1;
        d = out.k7;
        det_here = out.det1;
        eta = eta1;

        // PI controller
        let mut fac = SAFETY * err.powf(-K_ALPHA) * err_prev.powf(K_BETA);
        fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
        if rejected_last {
            fac = fac.min(1.0);
        }
        rejected_last = false;
        err_prev = err.max(1e-4);
        h = (h * fac).max(config.min_step);
    };

    SolutionTable {
        rows: emitter.rows,
        termination,
        config: config.clone(),
        segments,
    }
}

/// Bisects for the smallest eta in (lo, hi] where `past_event(determinant)`
/// holds, to 1e-10 in eta.
fn bisect_on_segment<F>(ctx: &RhsCtx<'_>, seg: &Segment, lo: f64, hi: f64, past_event: F) -> f64
where
    F: Fn(f64) -> bool,
{
    let mut lo = lo;
    let mut hi = hi;
    for _ in 0..200 {
        if hi - lo <= 1e-10 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let y = seg.eval(mid);
        let crossed = match ctx.determinant_of(mid, &y) {
            Some(det) => past_event(det),
            None => true,
        };
        if crossed {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn run_euler(
    config: &IntegrationConfig,
    ctx: &RhsCtx<'_>,
    mut y: [f64; 4],
    mut d: [f64; 4],
    step: f64,
    mut emitter: Emitter<'_>,
) -> SolutionTable {
    let mut eta = config.eta_start;
    let mut det_here = ctx.determinant_of(eta, &y).unwrap_or(f64::NAN);
    let mut steps: u64 = 0;

    let termination = loop {
        if eta >= config.eta_end {
            break Termination::ReachedEnd;
        }
        if steps >= config.max_steps {
            break Termination::MaxSteps;
        }
        steps += 1;
        let h = step.min(config.eta_end - eta);
        let eta1 = eta + h;
        let mut y1 = y;
        for i in 0..4 {
            y1[i] += h * d[i];
        }
        let (d1, det1) = match ctx.eval(eta1, &y1) {
            Ok(v) => v,
            Err(cause) => break stop_cause_termination(cause, eta1),
        };
        if det_here.is_finite() && det1.is_finite() && det_here.signum() != det1.signum() {
            // refine on linearly interpolated states
            let (y0c, e0) = (y, eta);
            let eta_star = {
                let mut lo = e0;
                let mut hi = eta1;
                for _ in 0..200 {
                    if hi - lo <= 1e-10 {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    let w = (mid - e0) / h;
                    let mut ym = [0.0; 4];
                    for i in 0..4 {
                        ym[i] = y0c[i] + w * (y1[i] - y0c[i]);
                    }
                    let crossed = match ctx.determinant_of(mid, &ym) {
                        Some(det) => det.signum() != det_here.signum(),
                        None => true,
                    };
                    if crossed {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            break Termination::CriticalPoint { eta: eta_star };
        }
        // per-sampling emission; interpolation between Euler nodes is linear
        let (ya, ea) = (y, eta);
        emitter.emit_interval(ctx, eta, eta1, should_emit_node(config, &emitter, eta1), |e| {
            let w = (e - ea) / h;
            let mut v = [0.0; 4];
            for i in 0..4 {
                v[i] = ya[i] + w * (y1[i] - ya[i]);
            }
            v
        });
        y = y1;
        d = d1;
        det_here = det1;
        eta = eta1;
    };

    // the final node is always a row
    if eta > config.eta_start {
        emitter.push(ctx, eta, &y);
    }
    SolutionTable {
        rows: emitter.rows,
        termination,
        config: config.clone(),
        segments: Vec::new(),
    }
}

/// Euler emits every node under `Accepted` sampling, and thins nodes under
/// the dense policies so tables stay proportionate.
fn should_emit_node(config: &IntegrationConfig, emitter: &Emitter<'_>, eta1: f64) -> bool {
    match &config.sampling {
        Sampling::Accepted => true,
        Sampling::Dense { rel, cap } => {
            let last = emitter.rows.last().map(|r| r.eta).unwrap_or(eta1);
            eta1 - last >= 0.5 * (rel * last).min(*cap)
        }
        Sampling::Points(_) => false,
    }
}

/// Runs each config independently; results in input order, one failure does
/// not abort the rest. Elements may run concurrently.
pub fn sweep(
    configs: &[IntegrationConfig],
    exp: &SimilarityExponents,
    eos: &ChaplyginEos,
) -> Vec<Result<SolutionTable, SetupError>> {
    configs
        .par_iter()
        .map(|c| integrate(c, exp, eos))
        .collect()
}

/// Reference value 4*pi, the Poisson source coefficient in geometrical units.
pub const FOUR_PI: f64 = 4.0 * PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantId;
    use approx::assert_relative_eq;

    fn setup(variant: VariantId, n: f64, a: f64) -> (SimilarityExponents, ChaplyginEos) {
        (
            SimilarityExponents::for_variant(variant, n).unwrap(),
            ChaplyginEos::new(a, n).unwrap(),
        )
    }

    fn derived_config() -> IntegrationConfig {
        IntegrationConfig {
            rtol: 1e-10,
            momentum_form: MomentumForm::PdeDerived,
            ..Default::default()
        }
    }

    #[test]
    fn default_derived_run_reaches_end() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let table = integrate(&derived_config(), &exp, &eos).unwrap();
        assert_eq!(table.termination, Termination::ReachedEnd);
        let first = table.rows.first().unwrap();
        assert_eq!(
            (first.eta, first.f, first.g, first.h, first.q),
            (1e-3, 0.0, 1.0, 0.0, 0.0)
        );
        let last = table.rows.last().unwrap();
        assert_eq!(last.eta, 5.0);
        // eta strictly increasing, all values finite
        for w in table.rows.windows(2) {
            assert!(w[1].eta > w[0].eta);
        }
        for r in &table.rows {
            for v in [r.eta, r.f, r.g, r.h, r.q, r.determinant] {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn as_printed_default_run_hits_critical_point() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let config = IntegrationConfig {
            rtol: 1e-10,
            ..Default::default()
        };
        let table = integrate(&config, &exp, &eos).unwrap();
        match table.termination {
            Termination::CriticalPoint { eta } => {
                assert!((1.55..1.75).contains(&eta), "eta = {eta}");
            }
            other => panic!("expected critical point, got {other:?}"),
        }
        let last = table.rows.last().unwrap().eta;
        if let Termination::CriticalPoint { eta } = table.termination {
            assert!(last <= eta);
        }
    }

    #[test]
    fn critical_start_terminates_immediately() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let config = IntegrationConfig {
            eta_start: 1.0,
            eta_end: 2.0,
            f0: (3.0 - 5.0_f64.sqrt()) / 2.0,
            ..Default::default()
        };
        let table = integrate(&config, &exp, &eos).unwrap();
        match table.termination {
            Termination::CriticalPoint { eta } => assert!((eta - 1.0).abs() <= 1e-6),
            other => panic!("expected critical point, got {other:?}"),
        }
        assert_eq!(table.rows.len(), 1);
    }

    #[test]
    fn near_critical_start_stops_near_start() {
        // four-digit initial value just below the determinant root: a fold
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let config = IntegrationConfig {
            eta_start: 1.0,
            eta_end: 2.0,
            f0: 0.3819,
            ..Default::default()
        };
        let table = integrate(&config, &exp, &eos).unwrap();
        match table.termination {
            Termination::CriticalPoint { eta } => assert!((eta - 1.0).abs() < 1e-2, "eta = {eta}"),
            other => panic!("expected critical point, got {other:?}"),
        }
    }

    #[test]
    fn euler_matches_adaptive() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let mut config = derived_config();
        config.eta_end = 1.0;
        let adaptive = integrate(&config, &exp, &eos).unwrap();
        config.mode = Mode::FixedEuler { step: 1e-5 };
        config.sampling = Sampling::Dense {
            rel: 1e-2,
            cap: 1e-2,
        };
        let euler = integrate(&config, &exp, &eos).unwrap();
        assert_eq!(euler.termination, Termination::ReachedEnd);
        let a = adaptive.rows.last().unwrap();
        let e = euler.rows.last().unwrap();
        assert_eq!(a.eta, e.eta);
        for (x, y) in [(a.f, e.f), (a.g, e.g), (a.h, e.h), (a.q, e.q)] {
            assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn dense_sampling_controls_row_spacing() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let mut config = derived_config();
        config.sampling = Sampling::Dense {
            rel: 5e-3,
            cap: 1e-3,
        };
        let table = integrate(&config, &exp, &eos).unwrap();
        for w in table.rows.windows(2) {
            let max_gap = (5e-3 * w[0].eta).min(1e-3);
            assert!(
                w[1].eta - w[0].eta <= max_gap * 1.5 + 1e-12,
                "gap {} at eta {}",
                w[1].eta - w[0].eta,
                w[0].eta
            );
        }
    }

    #[test]
    fn requested_points_appear_as_rows() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let mut config = derived_config();
        config.sampling = Sampling::Points(vec![0.5, 1.25, 2.5]);
        let table = integrate(&config, &exp, &eos).unwrap();
        for p in [0.5, 1.25, 2.5] {
            assert!(
                table.rows.iter().any(|r| (r.eta - p).abs() < 1e-12),
                "missing requested point {p}"
            );
        }
    }

    #[test]
    fn dense_output_matches_rows() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let table = integrate(&derived_config(), &exp, &eos).unwrap();
        assert!(table.has_dense_output());
        for r in table.rows.iter().step_by(7) {
            let v = table.sample(r.eta).unwrap();
            assert_relative_eq!(v[0], r.f, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(v[1], r.g, max_relative = 1e-12, epsilon = 1e-12);
        }
        assert!(table.sample(5.0 + 1e-9).is_none());
        assert!(table.sample(1e-4).is_none());
    }

    #[test]
    fn interpolant_defect_within_error_control() {
        // quarter-point defect of each step stays below 100*rtol*(term scale)
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        for rtol in [1e-6, 1e-10] {
            let mut config = derived_config();
            config.rtol = rtol;
            let table = integrate(&config, &exp, &eos).unwrap();
            for (lo, hi) in table.step_intervals() {
                for theta in [0.25, 0.5, 0.75] {
                    let eta = lo + theta * (hi - lo);
                    let (v, slope) = table.sample_with_slope(eta).unwrap();
                    let state = ShapeState {
                        eta,
                        f: v[0],
                        g: v[1],
                        h: v[2],
                        q: v[3],
                    };
                    let d = crate::reduction::ShapeDerivatives {
                        f_prime: slope[0],
                        g_prime: slope[1],
                        h_prime: v[3],
                        h_double_prime: slope[3],
                    };
                    let defects =
                        crate::reduction::equation_defects(&state, &d, &exp, &eos, config.momentum_form);
                    for (defect, scale) in defects.defects().into_iter().zip(defects.scales()) {
                        assert!(
                            defect.abs() <= 100.0 * rtol * scale.max(1.0),
                            "defect {defect:e} vs 100*rtol*scale {:e} at eta {eta}",
                            100.0 * rtol * scale.max(1.0)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn classify_definition_cases() {
        let (_exp, _eos) = setup(VariantId::III, 1.0, 1.0);
        let config = IntegrationConfig::default();
        let row = |eta: f64, f: f64| SolutionRow {
            eta,
            f,
            g: 1.0,
            h: 0.0,
            q: 0.0,
            determinant: 1.0,
        };
        // non-negative throughout + reached end
        let t = SolutionTable::from_rows(
            vec![row(1.0, 0.0), row(2.0, 0.0)],
            Termination::ReachedEnd,
            config.clone(),
        );
        assert_eq!(classify(&t).unwrap(), Classification::Expansion);
        // crosses negative
        let t = SolutionTable::from_rows(
            vec![row(1.0, 0.5), row(2.0, -0.1)],
            Termination::ReachedEnd,
            config.clone(),
        );
        assert_eq!(classify(&t).unwrap(), Classification::Collapse);
        // positive but terminated early
        let t = SolutionTable::from_rows(
            vec![row(1.0, 0.5), row(2.0, 0.4)],
            Termination::CriticalPoint { eta: 2.0 },
            config.clone(),
        );
        assert_eq!(classify(&t).unwrap(), Classification::Indeterminate);
        // too few rows
        let t = SolutionTable::from_rows(vec![row(1.0, 0.0)], Termination::MaxSteps, config);
        assert!(matches!(classify(&t), Err(ClassifyError::TooFewRows(1))));
    }

    #[test]
    fn sweep_matches_standalone_and_is_deterministic() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let mut config = derived_config();
        config.eta_end = 0.5;
        let standalone = integrate(&config, &exp, &eos).unwrap();
        let results = sweep(&[config.clone(), config.clone()], &exp, &eos);
        assert_eq!(results.len(), 2);
        for r in &results {
            let t = r.as_ref().unwrap();
            assert_eq!(t.rows.len(), standalone.rows.len());
            for (a, b) in t.rows.iter().zip(&standalone.rows) {
                assert_eq!(a, b, "sweep element differs from standalone run");
            }
        }
    }

    #[test]
    fn sweep_isolates_failures() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let good = derived_config();
        let bad = IntegrationConfig {
            eta_start: 2.0,
            eta_end: 1.0,
            ..Default::default()
        };
        let results = sweep(&[bad, good], &exp, &eos);
        assert!(results[0].is_err());
        assert!(results[1].is_ok());
    }

    #[test]
    fn setup_rejects_density_below_floor() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let config = IntegrationConfig {
            g0: 1e-13,
            ..Default::default()
        };
        assert!(matches!(
            integrate(&config, &exp, &eos),
            Err(SetupError::InitialDensityBelowFloor { .. })
        ));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let (exp, eos) = setup(VariantId::III, 1.0, 1.0);
        let a = integrate(&derived_config(), &exp, &eos).unwrap();
        let b = integrate(&derived_config(), &exp, &eos).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn quintic_hermite_reproduces_quintic_polynomials() {
        // p(x) = x^5 - 2x^3 + x, p'(x) = 5x^4 - 6x^2 + 1
        let p = |x: f64| x.powi(5) - 2.0 * x.powi(3) + x;
        let dp = |x: f64| 5.0 * x.powi(4) - 6.0 * x.powi(2) + 1.0;
        let (x0, x1) = (0.3, 1.1);
        let xm = 0.5 * (x0 + x1);
        let v = |x: f64| [p(x); 4];
        let s = |x: f64| [dp(x); 4];
        let seg = Segment::build(x0, x1, &v(x0), &s(x0), &v(xm), &s(xm), &v(x1), &s(x1));
        for k in 0..=20 {
            let x = x0 + (x1 - x0) * k as f64 / 20.0;
            let (val, slope) = seg.eval_with_slope(x);
            assert_relative_eq!(val[0], p(x), max_relative = 1e-13, epsilon = 1e-13);
            assert_relative_eq!(slope[0], dp(x), max_relative = 1e-12, epsilon = 1e-12);
        }
    }
}

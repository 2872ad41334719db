//! Concrete systems: the two-dimensional toy model, deterministic
//! Hodgkin–Huxley, and the five-dimensional CIR-HH and OU-HH diffusions.
//!
//! Units are milliseconds for time and millivolts for the membrane
//! potential. States of the HH family are ordered `(v, n, m, h, xi)`; in
//! symbolic fields these are `x1..x5`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse, phi, Expr, SymVectorField, TimeComponent};

/// Ionic current of the HH membrane equation.
pub fn current_f(v: f64, n: f64, m: f64, h: f64) -> f64 {
    36.0 * n.powi(4) * (v + 12.0) + 120.0 * m.powi(3) * h * (v - 120.0) + 0.3 * (v - 10.6)
}

/// ∂F/∂(v, n, m, h).
pub fn current_f_gradient(v: f64, n: f64, m: f64, h: f64) -> [f64; 4] {
    [
        36.0 * n.powi(4) + 120.0 * m.powi(3) * h + 0.3,
        144.0 * n.powi(3) * (v + 12.0),
        360.0 * m * m * h * (v - 120.0),
        120.0 * m.powi(3) * (v - 120.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    N,
    M,
    H,
}

impl Gate {
    pub const ALL: [Gate; 3] = [Gate::N, Gate::M, Gate::H];

    /// Index in the `(v, n, m, h, xi)` ordering.
    pub fn index(self) -> usize {
        match self {
            Gate::N => 1,
            Gate::M => 2,
            Gate::H => 3,
        }
    }
}

/// Opening and closing rates `(alpha, beta)` of one gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub alpha: f64,
    pub beta: f64,
}

impl Rate {
    pub fn equilibrium(self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn total(self) -> f64 {
        self.alpha + self.beta
    }

    /// Right-hand side of the gate equation.
    pub fn rhs(self, j: f64) -> f64 {
        self.alpha * (1.0 - j) - self.beta * j
    }
}

/// Classical HH rate functions with removable singularities routed through
/// [`phi`].
pub fn rate(gate: Gate, v: f64) -> Rate {
    match gate {
        Gate::N => Rate { alpha: 0.1 * phi((10.0 - v) / 10.0), beta: 0.125 * (-v / 80.0).exp() },
        Gate::M => Rate { alpha: phi((25.0 - v) / 10.0), beta: 4.0 * (-v / 18.0).exp() },
        Gate::H => Rate {
            alpha: 0.07 * (-v / 20.0).exp(),
            beta: 1.0 / (((30.0 - v) / 10.0).exp() + 1.0),
        },
    }
}

pub fn rates(v: f64) -> [Rate; 3] {
    [rate(Gate::N, v), rate(Gate::M, v), rate(Gate::H, v)]
}

/// `j_inf(v) = alpha_j / (alpha_j + beta_j)`.
pub fn gate_equilibrium(gate: Gate, v: f64) -> f64 {
    rate(gate, v).equilibrium()
}

/// The six rate functions as expressions in `x1 = v`.
#[derive(Debug, Clone)]
pub struct HHRateSet {
    pub alpha_n: Expr,
    pub beta_n: Expr,
    pub alpha_m: Expr,
    pub beta_m: Expr,
    pub alpha_h: Expr,
    pub beta_h: Expr,
}

impl HHRateSet {
    pub fn standard() -> HHRateSet {
        let p = |s: &str| parse(s).expect("built-in rate expression");
        HHRateSet {
            alpha_n: p("0.1*phi((10 - x1)/10)"),
            beta_n: p("0.125*exp(-x1/80)"),
            alpha_m: p("phi((25 - x1)/10)"),
            beta_m: p("4*exp(-x1/18)"),
            alpha_h: p("0.07*exp(-x1/20)"),
            beta_h: p("1/(exp((30 - x1)/10) + 1)"),
        }
    }

    pub fn pair(&self, gate: Gate) -> (&Expr, &Expr) {
        match gate {
            Gate::N => (&self.alpha_n, &self.beta_n),
            Gate::M => (&self.alpha_m, &self.beta_m),
            Gate::H => (&self.alpha_h, &self.beta_h),
        }
    }

    /// `alpha_j(v) (1 - j) - beta_j(v) j` with `j = x2, x3, x4`.
    pub fn gate_rhs(&self, gate: Gate) -> Expr {
        let (a, b) = self.pair(gate);
        let j = Expr::x(gate.index() as u8 + 1);
        a * &(1.0 - j.clone()) - b * &j
    }
}

/// `F(v, n_inf(v), m_inf(v), h_inf(v))`, strictly increasing in `v`.
pub fn f_infinity(v: f64) -> f64 {
    let [n, m, h] = rates(v).map(Rate::equilibrium);
    current_f(v, n, m, h)
}

/// Solves `F_inf(v) = c` by bracketing, bisection and a Newton polish.
pub fn rest_potential(c: f64) -> Result<f64> {
    let g = |v: f64| f_infinity(v) - c;
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut width = 1.0;
    while g(lo) > 0.0 || g(hi) < 0.0 {
        width *= 2.0;
        if width > 1e6 {
            return Err(Error::Domain(format!("no bracket for F_inf(v) = {c}")));
        }
        lo = -width;
        hi = width;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    let mut v = 0.5 * (lo + hi);
    for _ in 0..5 {
        let h = 1e-6 * (1.0 + v.abs());
        let slope = (g(v + h) - g(v - h)) / (2.0 * h);
        let step = g(v) / slope;
        if !step.is_finite() || (v - step) < lo - 1e-6 || (v - step) > hi + 1e-6 {
            break;
        }
        v -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    Ok(v)
}

/// A nonnegative T-periodic input
/// `S(t) = s0 + sum_k (a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Signal {
    period: f64,
    s0: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
    #[serde(skip)]
    min: f64,
}

impl Signal {
    pub fn new(period: f64, s0: f64, cos: Vec<f64>, sin: Vec<f64>) -> Result<Signal> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Config(format!("signal period must be positive, got {period}")));
        }
        if s0 < 0.0 || !s0.is_finite() {
            return Err(Error::Config(format!("signal mean level s0 must be >= 0, got {s0}")));
        }
        if cos.iter().chain(&sin).any(|c| !c.is_finite()) {
            return Err(Error::Config("signal coefficients must be finite".into()));
        }
        let mut s = Signal { period, s0, cos, sin, min: 0.0 };
        s.min = s.compute_min();
        let norm = s.coefficient_norm();
        // s0 >= sum |coefficients| certifies nonnegativity outright.
        if s0 < norm && s.min < -1e-12 * (1.0 + s0 + norm) {
            return Err(Error::Config(format!(
                "signal must be nonnegative, but min S(t) = {:.6e}",
                s.min
            )));
        }
        Ok(s)
    }

    /// `S(t) = s0 + s1 sin^2(pi t / T)`.
    pub fn sin_squared(s0: f64, s1: f64, period: f64) -> Result<Signal> {
        Signal::new(period, s0 + 0.5 * s1, vec![-0.5 * s1], vec![])
    }

    pub fn constant(s0: f64, period: f64) -> Result<Signal> {
        Signal::new(period, s0, vec![], vec![])
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn mean(&self) -> f64 {
        self.s0
    }

    pub fn cos_coefficients(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin_coefficients(&self) -> &[f64] {
        &self.sin
    }

    fn omega(&self) -> f64 {
        2.0 * PI / self.period
    }

    fn coefficient_norm(&self) -> f64 {
        self.cos.iter().chain(&self.sin).map(|c| c.abs()).sum()
    }

    pub fn eval(&self, t: f64) -> f64 {
        let w = self.omega() * t;
        let mut s = self.s0;
        for (k, a) in self.cos.iter().enumerate() {
            s += a * ((k + 1) as f64 * w).cos();
        }
        for (k, b) in self.sin.iter().enumerate() {
            s += b * ((k + 1) as f64 * w).sin();
        }
        s
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let om = self.omega();
        let w = om * t;
        let mut s = 0.0;
        for (k, a) in self.cos.iter().enumerate() {
            let kf = (k + 1) as f64;
            s -= a * kf * om * (kf * w).sin();
        }
        for (k, b) in self.sin.iter().enumerate() {
            let kf = (k + 1) as f64;
            s += b * kf * om * (kf * w).cos();
        }
        s
    }

    /// `∫_0^t S(r) dr`.
    pub fn integral(&self, t: f64) -> f64 {
        let om = self.omega();
        let w = om * t;
        let mut s = self.s0 * t;
        for (k, a) in self.cos.iter().enumerate() {
            let kf = (k + 1) as f64;
            s += a * (kf * w).sin() / (kf * om);
        }
        for (k, b) in self.sin.iter().enumerate() {
            let kf = (k + 1) as f64;
            s += b * (1.0 - (kf * w).cos()) / (kf * om);
        }
        s
    }

    /// `min_t S(t)`, from a dense grid refined by golden-section search.
    pub fn min_value(&self) -> f64 {
        self.min
    }

    fn compute_min(&self) -> f64 {
        if self.cos.is_empty() && self.sin.is_empty() {
            return self.s0;
        }
        // At least 64 samples per period of the highest harmonic, so every
        // local minimum shows up as a discrete one before refinement.
        let harmonics = self.cos.len().max(self.sin.len());
        let grid = 4096.max(64 * harmonics);
        let h = self.period / grid as f64;
        let vals: Vec<f64> = (0..grid).map(|i| self.eval(i as f64 * h)).collect();
        let mut best = f64::INFINITY;
        for i in 0..grid {
            let (l, r) = (vals[(i + grid - 1) % grid], vals[(i + 1) % grid]);
            best = best.min(vals[i]);
            if vals[i] <= l && vals[i] <= r {
                let t = i as f64 * h;
                best = best.min(golden_min(|t| self.eval(t), t - h, t + h));
            }
        }
        best
    }

    /// `S` as an expression in `t`.
    pub fn expr(&self) -> Expr {
        let mut e = Expr::constant(self.s0);
        let w = Expr::constant(self.omega()) * Expr::t();
        for (k, a) in self.cos.iter().enumerate() {
            if *a != 0.0 {
                e = e + *a * ((k + 1) as f64 * w.clone()).cos();
            }
        }
        for (k, b) in self.sin.iter().enumerate() {
            if *b != 0.0 {
                e = e + *b * ((k + 1) as f64 * w.clone()).sin();
            }
        }
        e
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd)
}

/// Input of the deterministic HH system.
#[derive(Debug, Clone, PartialEq)]
pub enum HhInput {
    Constant(f64),
    Signal(Signal),
}

impl HhInput {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            HhInput::Constant(c) => *c,
            HhInput::Signal(s) => s.eval(t),
        }
    }
}

/// The systems the toolkit knows.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `dxi = -c sin^2(2 pi t) xi dt + dB`, `dpsi = (1 - psi) dt + psi dB`.
    Toy { c: f64 },
    DeterministicHh { input: HhInput },
    Cir { a: f64, signal: Signal },
    Ou { signal: Signal },
}

/// Default CIR level `a`.
pub const DEFAULT_CIR_A: f64 = 1.0;

/// Default signal: `S(t) = 0.5 + 10 sin^2(pi t / 10)`.
pub fn default_signal() -> Signal {
    Signal::sin_squared(0.5, 10.0, 10.0).expect("default signal is valid")
}

impl ModelSpec {
    pub fn toy(c: f64) -> Result<ModelSpec> {
        let m = ModelSpec::Toy { c };
        m.validate()?;
        Ok(m)
    }

    pub fn cir(a: f64, signal: Signal) -> Result<ModelSpec> {
        let m = ModelSpec::Cir { a, signal };
        m.validate()?;
        Ok(m)
    }

    pub fn ou(signal: Signal) -> ModelSpec {
        ModelSpec::Ou { signal }
    }

    pub fn hh_constant(c: f64) -> ModelSpec {
        ModelSpec::DeterministicHh { input: HhInput::Constant(c) }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Toy { c } if !(*c > 0.0 && c.is_finite()) => {
                Err(Error::Config(format!("toy model requires c > 0, got {c}")))
            }
            ModelSpec::Cir { a, .. } if !(2.0 * a > 1.0 && a.is_finite()) => {
                Err(Error::Config(format!("CIR input requires 2a > 1, got a = {a}")))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Toy { .. } => 2,
            ModelSpec::DeterministicHh { .. } => 4,
            ModelSpec::Cir { .. } | ModelSpec::Ou { .. } => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Toy { .. } => "toy",
            ModelSpec::DeterministicHh { .. } => "hh",
            ModelSpec::Cir { .. } => "cir",
            ModelSpec::Ou { .. } => "ou",
        }
    }

    /// Drift period: 1 for the toy model, the signal period otherwise.
    pub fn period(&self) -> Option<f64> {
        match self {
            ModelSpec::Toy { .. } => Some(1.0),
            ModelSpec::DeterministicHh { input: HhInput::Signal(s) } => Some(s.period()),
            ModelSpec::DeterministicHh { .. } => None,
            ModelSpec::Cir { signal, .. } | ModelSpec::Ou { signal } => Some(signal.period()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, ModelSpec::DeterministicHh { .. })
    }

    /// Toy forcing `c sin^2(2 pi t)`, the HH signal otherwise.
    pub fn input(&self, t: f64) -> f64 {
        match self {
            ModelSpec::Toy { c } => c * (2.0 * PI * t).sin().powi(2),
            ModelSpec::DeterministicHh { input } => input.eval(t),
            ModelSpec::Cir { signal, .. } | ModelSpec::Ou { signal } => signal.eval(t),
        }
    }

    /// Checks membership in the state space.
    pub fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} model has dimension {}, got a state of length {}",
                self.name(),
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("state has non-finite coordinates".into()));
        }
        if self.dim() >= 4 {
            for g in Gate::ALL {
                let j = x[g.index()];
                if !(0.0..=1.0).contains(&j) {
                    return Err(Error::Domain(format!("gate {g:?} = {j} outside [0, 1]")));
                }
            }
        }
        if let ModelSpec::Cir { .. } = self {
            if x[4] <= 0.0 {
                return Err(Error::Domain(format!("CIR input xi = {} must be positive", x[4])));
            }
        }
        Ok(())
    }

    /// Itô drift. `xi` enters through `max(xi, 0)` in CIR mode so that the
    /// full-truncation scheme can reuse this.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::Toy { .. } => {
                out[0] = -self.input(t) * x[0];
                out[1] = 1.0 - x[1];
            }
            ModelSpec::DeterministicHh { input } => {
                hh_core(x, out);
                out[0] += input.eval(t);
            }
            ModelSpec::Cir { a, signal } => {
                hh_core(x, out);
                let dxi = a + signal.eval(t) - x[4].max(0.0);
                out[0] += dxi;
                out[4] = dxi;
            }
            ModelSpec::Ou { signal } => {
                hh_core(x, out);
                let dxi = signal.eval(t) - x[4];
                out[0] += dxi;
                out[4] = dxi;
            }
        }
    }

    /// The single diffusion column.
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            ModelSpec::Toy { .. } => {
                out[0] = 1.0;
                out[1] = x[1];
            }
            ModelSpec::DeterministicHh { .. } => {}
            ModelSpec::Cir { .. } => {
                let s = x[4].max(0.0).sqrt();
                out[0] = s;
                out[4] = s;
            }
            ModelSpec::Ou { .. } => {
                out[0] = 1.0;
                out[4] = 1.0;
            }
        }
    }

    /// Itô drift minus `(1/2) sum_j sigma^j d_j sigma`.
    pub fn stratonovich_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.drift(t, x, out);
        match self {
            ModelSpec::Toy { .. } => out[1] -= 0.5 * x[1],
            ModelSpec::Cir { .. } => {
                out[0] -= 0.25;
                out[4] -= 0.25;
            }
            _ => {}
        }
    }

    /// `(V0, V1)`: the Stratonovich drift with time component 1 and the
    /// diffusion column with time component 0.
    pub fn symbolic_fields(&self) -> Result<(SymVectorField, SymVectorField)> {
        let (drift, diff) = match self {
            ModelSpec::Toy { c } => {
                let xi = Expr::x(1);
                let psi = Expr::x(2);
                let s = (Expr::constant(2.0 * PI) * Expr::t()).sin().powi(2);
                (
                    vec![-*c * s * xi, 1.0 - 1.5 * psi.clone()],
                    vec![Expr::one(), psi],
                )
            }
            ModelSpec::DeterministicHh { .. } => {
                return Err(Error::InvalidField(
                    "the deterministic HH system has no diffusion field".into(),
                ))
            }
            ModelSpec::Cir { a, signal } => {
                let dxi = (a - 0.25) + signal.expr() - Expr::x(5);
                let sq = Expr::x(5).sqrt();
                (
                    hh_symbolic(dxi),
                    vec![sq.clone(), Expr::zero(), Expr::zero(), Expr::zero(), sq],
                )
            }
            ModelSpec::Ou { signal } => {
                let dxi = signal.expr() - Expr::x(5);
                let one = Expr::one();
                (
                    hh_symbolic(dxi),
                    vec![one.clone(), Expr::zero(), Expr::zero(), Expr::zero(), one],
                )
            }
        };
        Ok((
            SymVectorField::new(TimeComponent::One, drift, "V0")?,
            SymVectorField::new(TimeComponent::Zero, diff, "V1")?,
        ))
    }

    /// The attainable point: the rest state with `xi = 1` (CIR), `xi = 0`
    /// (OU), or `(0, 2/3)` for the toy model. For the deterministic HH
    /// system this is the equilibrium at the constant input.
    pub fn target(&self) -> Result<Vec<f64>> {
        match self {
            ModelSpec::Toy { .. } => Ok(vec![0.0, 2.0 / 3.0]),
            ModelSpec::DeterministicHh { input: HhInput::Constant(c) } => {
                Ok(hh_equilibrium(*c)?.to_vec())
            }
            ModelSpec::DeterministicHh { .. } => Err(Error::Domain(
                "time-dependent HH input has no equilibrium".into(),
            )),
            ModelSpec::Cir { .. } => {
                let e = hh_equilibrium(0.0)?;
                Ok(vec![e[0], e[1], e[2], e[3], 1.0])
            }
            ModelSpec::Ou { .. } => {
                let e = hh_equilibrium(0.0)?;
                Ok(vec![e[0], e[1], e[2], e[3], 0.0])
            }
        }
    }
}

/// `(v^c, n_inf, m_inf, h_inf)` at the rest potential for input `c`.
pub fn hh_equilibrium(c: f64) -> Result<[f64; 4]> {
    let v = rest_potential(c)?;
    let [n, m, h] = rates(v).map(Rate::equilibrium);
    Ok([v, n, m, h])
}

// -F in slot 0 and the three gate equations.
fn hh_core(x: &[f64], out: &mut [f64]) {
    let v = x[0];
    out[0] = -current_f(v, x[1], x[2], x[3]);
    for (g, r) in Gate::ALL.iter().zip(rates(v)) {
        out[g.index()] = r.rhs(x[g.index()]);
    }
}

fn hh_symbolic(dxi: Expr) -> Vec<Expr> {
    let f = parse("36*x2^4*(x1 + 12) + 120*x3^3*x4*(x1 - 120) + 0.3*(x1 - 10.6)")
        .expect("built-in current expression");
    let rs = HHRateSet::standard();
    vec![
        dxi.clone() - f,
        rs.gate_rhs(Gate::N),
        rs.gate_rhs(Gate::M),
        rs.gate_rhs(Gate::H),
        dxi,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn current_examples() {
        assert_eq!(current_f(10.6, 0.0, 0.0, 0.0), 0.0);
        assert!((current_f(-12.0, 1.0, 0.0, 0.0) + 6.78).abs() < 1e-12);
        // 36*0.0081*12 + 120*0.000125*0.6*(-120) + 0.3*(-10.6)
        let hand = 3.4992 - 1.08 - 3.18;
        assert!((current_f(0.0, 0.3, 0.05, 0.6) - hand).abs() < 1e-12);
    }

    #[test]
    fn rest_potential_matches_reference() {
        let v0 = rest_potential(0.0).unwrap();
        assert!((v0 - 0.0462).abs() < 5e-3, "{v0}");
        // Independent evaluation of the same root.
        assert!((v0 - 0.046_214_857_938_441_6).abs() < 1e-10);
        for c in [-5.0, 0.0, 5.0, 20.0] {
            let v = rest_potential(c).unwrap();
            assert!((f_infinity(v) - c).abs() < 1e-10, "c={c}");
        }
    }

    #[test]
    fn rest_potential_is_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in -20..=40 {
            let v = rest_potential(i as f64).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn rates_are_positive_and_finite_at_removable_points() {
        for i in 0..=3000 {
            let v = -100.0 + 0.1 * i as f64;
            for g in Gate::ALL {
                let r = rate(g, v);
                assert!(r.alpha > 0.0 && r.beta > 0.0, "{g:?} at {v}");
                let j = r.equilibrium();
                assert!(j > 0.0 && j < 1.0);
            }
        }
        assert!((rate(Gate::N, 10.0).alpha - 0.1).abs() < 1e-15);
        assert!((rate(Gate::M, 25.0).alpha - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_drift_vanishes() {
        let [v, n, m, h] = hh_equilibrium(0.0).unwrap();
        let spec = ModelSpec::ou(Signal::constant(0.0, 10.0).unwrap());
        let mut out = [0.0; 5];
        spec.drift(0.0, &[v, n, m, h, 0.0], &mut out);
        assert!(out.iter().all(|d| d.abs() < 1e-9), "{out:?}");
    }

    #[test]
    fn toy_drift_at_time_zero() {
        let spec = ModelSpec::toy(1.0).unwrap();
        let mut out = [0.0; 2];
        spec.drift(0.0, &[3.0, 0.25], &mut out);
        assert_eq!(out, [0.0, 0.75]);
    }

    #[test]
    fn cir_diffusion_column() {
        let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
        let mut out = [0.0; 5];
        spec.diffusion(&[0.0, 0.3, 0.1, 0.6, 4.0], &mut out);
        assert_eq!(out, [2.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn stratonovich_corrections() {
        let x = [12.0, 0.3, 0.1, 0.6, 2.5];
        let mut ito = [0.0; 5];
        let mut strat = [0.0; 5];
        let cir = ModelSpec::cir(1.0, default_signal()).unwrap();
        cir.drift(1.3, &x, &mut ito);
        cir.stratonovich_drift(1.3, &x, &mut strat);
        let d: Vec<f64> = strat.iter().zip(&ito).map(|(s, i)| s - i).collect();
        assert_eq!(d, vec![-0.25, 0.0, 0.0, 0.0, -0.25]);

        let ou = ModelSpec::ou(default_signal());
        ou.drift(1.3, &x, &mut ito);
        ou.stratonovich_drift(1.3, &x, &mut strat);
        assert_eq!(ito, strat);

        let toy = ModelSpec::toy(1.0).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        toy.drift(0.3, &[1.0, 0.8], &mut a);
        toy.stratonovich_drift(0.3, &[1.0, 0.8], &mut b);
        assert_eq!(b[0], a[0]);
        assert!((b[1] - a[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn symbolic_fields_match_numeric_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [
            ModelSpec::toy(1.0).unwrap(),
            ModelSpec::cir(1.0, default_signal()).unwrap(),
            ModelSpec::ou(Signal::new(7.0, 2.0, vec![0.5, -0.3], vec![0.7]).unwrap()),
        ];
        for spec in &specs {
            let (v0, v1) = spec.symbolic_fields().unwrap();
            let d = spec.dim();
            for _ in 0..100 {
                let t = rng.random_range(0.0..20.0);
                let x: Vec<f64> = if d == 2 {
                    vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]
                } else {
                    vec![
                        rng.random_range(-80.0..150.0),
                        rng.random(),
                        rng.random(),
                        rng.random(),
                        rng.random_range(0.01..30.0),
                    ]
                };
                let mut b = vec![0.0; d];
                let mut s = vec![0.0; d];
                spec.stratonovich_drift(t, &x, &mut b);
                spec.diffusion(&x, &mut s);
                for (u, w) in v0.eval(t, &x).iter().zip(&b) {
                    assert!((u - w).abs() <= 1e-12 * (1.0 + w.abs()), "{u} {w}");
                }
                for (u, w) in v1.eval(t, &x).iter().zip(&s) {
                    assert!((u - w).abs() <= 1e-12 * (1.0 + w.abs()));
                }
            }
        }
    }

    #[test]
    fn toy_diffusion_field_is_exact() {
        let (_, v1) = ModelSpec::toy(1.0).unwrap().symbolic_fields().unwrap();
        assert_eq!(v1.components()[0].to_string(), "1.0");
        assert_eq!(v1.components()[1].to_string(), "x2");
    }

    #[test]
    fn signal_rejects_negative_values() {
        assert!(Signal::new(10.0, 0.5, vec![1.0], vec![]).is_err());
        assert!(Signal::new(10.0, 1.0, vec![0.6], vec![0.6]).is_ok());
        assert!(Signal::new(10.0, 0.8, vec![0.6], vec![0.6]).is_err());
        assert!(Signal::sin_squared(0.0, 3.0, 10.0).is_ok());
        assert!(Signal::new(0.0, 1.0, vec![], vec![]).is_err());
    }

    #[test]
    fn signal_calculus() {
        let s = Signal::new(7.0, 2.0, vec![0.5, -0.3], vec![0.7]).unwrap();
        for &t in &[0.0, 1.1, 3.9, 6.5] {
            let h = 1e-5;
            let fd = (s.eval(t + h) - s.eval(t - h)) / (2.0 * h);
            assert!((fd - s.derivative(t)).abs() < 1e-8);
            let fi = (s.integral(t + h) - s.integral(t - h)) / (2.0 * h);
            assert!((fi - s.eval(t)).abs() < 1e-8);
            assert!((s.eval(t) - s.eval(t + 7.0)).abs() < 1e-12);
            assert!((s.expr().eval(t, &[]) - s.eval(t)).abs() < 1e-12);
        }
        assert_eq!(s.integral(0.0), 0.0);
        let sq = Signal::sin_squared(0.5, 1.0, 10.0).unwrap();
        assert!((sq.eval(2.0) - (0.5 + (PI * 0.2).sin().powi(2))).abs() < 1e-14);
        assert!((sq.min_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation_messages() {
        let e = ModelSpec::cir(0.5, default_signal()).unwrap_err();
        assert!(e.to_string().contains("2a > 1"));
        assert!(ModelSpec::toy(0.0).is_err());
    }
}

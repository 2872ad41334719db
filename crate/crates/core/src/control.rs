//! Deterministic control system `phi' = b~(t, phi) + sigma(phi) h'(t)` and
//! the multi-phase programs steering CIR-HH and OU-HH to their target points.
//!
//! Programs are lists of phase templates. A template is instantiated when its
//! phase starts, from the time and state reached so far, so that ramps can
//! start where the previous phase left off.
//!
//! Two phases drive the input coordinate across a range of order `K (f + 1)`,
//! which takes millions of milliseconds at unit speed. Once the HH part of the
//! state is stationary the input moves at a constant rate, so the integrator
//! jumps to the crossing in closed form ([`PhaseLaw::fast_forward`]). The
//! control energy of the skipped stretch is computed from the mean and
//! variance of the signal over a period, which is exact up to terms of
//! relative order `T / duration`.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{current_f, current_f_gradient, f_infinity, rates, ModelSpec, Rate, Signal};

pub type Feedback = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Ramp from `start` to `end` with `|r'| <= slope` that is constant after
/// `|end - start| / slope + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RampSpec {
    pub start: f64,
    pub end: f64,
    pub slope: f64,
    /// The ramp is `C^order`.
    pub order: u32,
}

impl RampSpec {
    pub fn new(start: f64, end: f64) -> RampSpec {
        RampSpec { start, end, slope: 1.0, order: 5 }
    }
}

/// `r' = sign * height * w(t)` where `w` rises from 0 to 1 on `[0, tau]`
/// through a polynomial smoothstep, stays at 1, and falls back on
/// `[duration - tau, duration]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ramp {
    start: f64,
    end: f64,
    height: f64,
    tau: f64,
    duration: f64,
    step: Vec<f64>,
    step_integral: Vec<f64>,
}

pub fn smooth_ramp(rs: RampSpec) -> Result<Ramp> {
    if !(rs.slope > 0.0 && rs.slope.is_finite()) {
        return Err(Error::Config(format!("ramp slope bound must be positive, got {}", rs.slope)));
    }
    if rs.order == 0 {
        return Err(Error::Config("ramp order must be at least 1".into()));
    }
    let dist = (rs.end - rs.start).abs();
    let duration = dist / rs.slope + 1.0;
    let (height, tau) = if dist >= rs.slope {
        (rs.slope, 1.0)
    } else {
        (2.0 * dist * rs.slope / (dist + rs.slope), duration / 2.0)
    };
    let step = smoothstep_coefficients(rs.order as usize - 1);
    let step_integral = std::iter::once(0.0)
        .chain(step.iter().enumerate().map(|(j, c)| c / (j + 1) as f64))
        .collect();
    Ok(Ramp { start: rs.start, end: rs.end, height, tau, duration, step, step_integral })
}

// Coefficients of x^(n+1) sum_k C(n+k, k) C(2n+1, n-k) (-x)^k in ascending powers.
fn smoothstep_coefficients(n: usize) -> Vec<f64> {
    let binom = |a: usize, b: usize| -> f64 { (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64) };
    let mut c = vec![0.0; 2 * n + 2];
    for k in 0..=n {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        c[n + 1 + k] = sign * binom(n + k, k) * binom(2 * n + 1, n - k);
    }
    c
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

impl Ramp {
    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    /// `(r(t), r'(t))` for local time `t` (the ramp starts at `t = 0`).
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if self.height == 0.0 || t <= 0.0 {
            return (self.start, 0.0);
        }
        if t >= self.duration {
            return (self.end, 0.0);
        }
        let s = (self.end - self.start).signum() * self.height;
        let (tau, d) = (self.tau, self.duration);
        if t < tau {
            let u = t / tau;
            (self.start + s * tau * horner(&self.step_integral, u), s * horner(&self.step, u))
        } else if t <= d - tau {
            (self.start + s * (tau * 0.5 + (t - tau)), s)
        } else {
            let u = (d - t) / tau;
            (self.end - s * tau * horner(&self.step_integral, u), s * horner(&self.step, u))
        }
    }
}

/// Constants of the CIR construction: `sup |F| <= f` on `(-12, 120) x [0,1]^3`,
/// gate and current relaxation bounded by `C e^(-lambda s)`, and the integer
/// `K` with `(K - 121)(1 + f) - C / lambda > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlConstants {
    pub f: f64,
    pub c: f64,
    pub lambda: f64,
    pub k: u64,
}

impl ControlConstants {
    /// Threshold `K (f + 1)` that phase III drives the input beyond.
    pub fn xi_threshold(&self) -> f64 {
        self.k as f64 * (self.f + 1.0)
    }

    /// Constants on the default grid, computed once.
    pub fn standard() -> ControlConstants {
        static C: OnceLock<ControlConstants> = OnceLock::new();
        *C.get_or_init(|| estimate_control_constants(2001, 11))
    }
}

/// Grid estimate with `v_points` voltages and `gate_points` values per gate.
///
/// `f` is 1.05 times the largest `|F|` on the grid. Gates relax as
/// `|j_s - j_inf| <= e^(-(alpha + beta) s)` from any start in `[0, 1]`, so `C`
/// is the larger of 1 and the gate Lipschitz constant of `F` in the max norm.
/// `K` is the smallest admissible integer plus 2.
pub fn estimate_control_constants(v_points: usize, gate_points: usize) -> ControlConstants {
    let (v_points, gate_points) = (v_points.max(2), gate_points.max(2));
    let grid = |k: usize, n: usize, lo: f64, hi: f64| lo + (hi - lo) * k as f64 / (n - 1) as f64;
    let mut f_max: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut lambda = f64::INFINITY;
    for iv in 0..v_points {
        let v = grid(iv, v_points, -12.0, 120.0);
        for r in rates(v) {
            lambda = lambda.min(r.total());
        }
        for a in 0..gate_points {
            let n = grid(a, gate_points, 0.0, 1.0);
            for b in 0..gate_points {
                let m = grid(b, gate_points, 0.0, 1.0);
                for c in 0..gate_points {
                    let h = grid(c, gate_points, 0.0, 1.0);
                    f_max = f_max.max(current_f(v, n, m, h).abs());
                    let g = current_f_gradient(v, n, m, h);
                    lip = lip.max(g[1].abs() + g[2].abs() + g[3].abs());
                }
            }
        }
    }
    let f = 1.05 * f_max;
    let c = lip.max(1.0);
    let need = (1.0 + c / lambda) / (1.0 + f);
    let mut k = 121 + need.floor() as u64;
    while (k as f64 - 121.0) * (1.0 + f) - c / lambda <= 1.0 {
        k += 1;
    }
    ControlConstants { f, c, lambda, k: k + 2 }
}

#[derive(Clone)]
pub enum RateRule {
    Explicit(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    Feedback(Feedback),
}

impl RateRule {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            RateRule::Explicit(f) => f(t),
            RateRule::Feedback(f) => f(t, x),
        }
    }
}

#[derive(Clone)]
pub enum StopRule {
    Duration(f64),
    /// Stops at the first step end with `g(t, x) <= 0`.
    Until { g: Feedback, cap: f64, on_cap: CapAction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CapAction {
    Fail,
    /// End the run and mark it as not converged.
    Report,
}

/// Closed-form jump of the input coordinate to `xi_target` once the first
/// four components are stationary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FastForward {
    pub xi_target: f64,
    /// Integration time allowed for the HH part to settle.
    pub settle_cap: f64,
}

#[derive(Clone)]
pub struct PhaseLaw {
    pub rate: RateRule,
    pub stop: StopRule,
    pub fast_forward: Option<FastForward>,
    pub ramp_distance: f64,
}

type Builder = Box<dyn Fn(f64, &[f64]) -> Result<PhaseLaw> + Send + Sync>;

pub struct PhaseTemplate {
    pub name: String,
    build: Builder,
}

impl PhaseTemplate {
    pub fn new(name: impl Into<String>, build: impl Fn(f64, &[f64]) -> Result<PhaseLaw> + Send + Sync + 'static) -> Self {
        PhaseTemplate { name: name.into(), build: Box::new(build) }
    }

    pub fn fixed(name: impl Into<String>, law: PhaseLaw) -> Self {
        PhaseTemplate::new(name, move |_, _| Ok(law.clone()))
    }
}

pub struct ControlProgram {
    pub phases: Vec<PhaseTemplate>,
    pub target: Vec<f64>,
    pub constants: Option<ControlConstants>,
}

impl ControlProgram {
    pub fn phase_names(&self) -> Vec<&str> {
        self.phases.iter().map(|p| p.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrateOptions {
    pub dt: f64,
    /// Keep every `record_stride`-th step in the path.
    pub record_stride: usize,
    /// Max-norm bound on the HH velocity below which fast-forward may jump.
    pub stationary_tol: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { dt: 0.01, record_stride: 1, stationary_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRecord {
    pub name: String,
    pub t_start: f64,
    pub t_end: f64,
    /// `∫ h'^2` over the phase.
    pub energy: f64,
    /// Length of the stretch skipped by fast-forward.
    pub skipped: Option<f64>,
    pub ramp_distance: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub xi_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlRun {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major recorded states.
    pub states: Vec<f64>,
    pub phases: Vec<PhaseRecord>,
    pub energy: f64,
    pub terminal: Vec<f64>,
    pub target: Vec<f64>,
    pub terminal_distance: f64,
    pub converged: bool,
}

impl ControlRun {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// End times of all phases, in order.
    pub fn phase_times(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.t_end).collect()
    }

    pub fn total_ramp_distance(&self) -> f64 {
        self.phases.iter().map(|p| p.ramp_distance).sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.state(k).iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct Field<'a> {
    spec: &'a ModelSpec,
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl Field<'_> {
    fn eval(&mut self, rate: &RateRule, t: f64, x: &[f64], out: &mut [f64]) -> f64 {
        self.spec.stratonovich_drift(t, x, &mut self.drift);
        self.spec.diffusion(x, &mut self.sigma);
        let u = rate.eval(t, x);
        for i in 0..out.len() {
            out[i] = self.drift[i] + self.sigma[i] * u;
        }
        u
    }
}

fn check(spec: &ModelSpec, t: f64, x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::StateSpaceExit { t, reason: "non-finite state".into() });
    }
    if let ModelSpec::Cir { .. } = spec {
        if x[4] <= 0.0 {
            return Err(Error::StateSpaceExit { t, reason: format!("xi = {} is not positive", x[4]) });
        }
    }
    Ok(())
}

/// Integrates the control system with classical RK4, phase by phase.
pub fn integrate_control(
    spec: &ModelSpec,
    x0: &[f64],
    program: &ControlProgram,
    opts: &IntegrateOptions,
) -> Result<ControlRun> {
    spec.check_state(x0)?;
    if !(opts.dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {}", opts.dt)));
    }
    let d = spec.dim();
    let stride = opts.record_stride.max(1);
    let mut field = Field { spec, drift: vec![0.0; d], sigma: vec![0.0; d] };
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut run = ControlRun {
        dim: d,
        times: vec![0.0],
        states: x0.to_vec(),
        phases: Vec::new(),
        energy: 0.0,
        terminal: Vec::new(),
        target: program.target.clone(),
        terminal_distance: f64::NAN,
        converged: true,
    };
    let dt = opts.dt;
    'phases: for tpl in &program.phases {
        let law = (tpl.build)(t, &x)?;
        let t_start = t;
        let mut rec = PhaseRecord {
            name: tpl.name.clone(),
            t_start,
            t_end: t,
            energy: 0.0,
            skipped: None,
            ramp_distance: law.ramp_distance,
            v_min: x[0],
            v_max: x[0],
            xi_min: x[d - 1],
        };
        let done = |t: f64, x: &[f64]| match &law.stop {
            StopRule::Duration(len) => t >= t_start + len - 1e-9 * dt,
            StopRule::Until { g, .. } => g(t, x) <= 0.0,
        };
        let mut steps = 0usize;
        while !done(t, &x) {
            if let StopRule::Until { cap, on_cap, .. } = &law.stop {
                if t - t_start > *cap {
                    match on_cap {
                        CapAction::Fail => return Err(Error::PhaseCap { phase: tpl.name.clone(), cap: *cap }),
                        CapAction::Report => {
                            run.converged = false;
                            rec.t_end = t;
                            run.energy += rec.energy;
                            run.phases.push(rec);
                            break 'phases;
                        }
                    }
                }
            }
            let h = match &law.stop {
                StopRule::Duration(len) => dt.min(t_start + len - t),
                _ => dt,
            };
            let u1 = field.eval(&law.rate, t, &x, &mut k1);
            if let Some(ff) = law.fast_forward {
                if d == 5 && k1[..4].iter().all(|v| v.abs() < opts.stationary_tol) {
                    let r = k1[4];
                    let gap = ff.xi_target - x[4];
                    if r != 0.0 && gap / r > 0.0 {
                        let span = gap / r;
                        rec.energy += jump_energy(spec, x[4], ff.xi_target, r)?;
                        rec.skipped = Some(span);
                        t += span;
                        x[4] = ff.xi_target;
                        rec.xi_min = rec.xi_min.min(x[4]);
                        run.times.push(t);
                        run.states.extend_from_slice(&x);
                        break;
                    }
                }
                if t - t_start > ff.settle_cap {
                    return Err(Error::PhaseCap { phase: format!("{} (settling)", tpl.name), cap: ff.settle_cap });
                }
            }
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            let u2 = field.eval(&law.rate, t + 0.5 * h, &tmp, &mut k2);
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            let u3 = field.eval(&law.rate, t + 0.5 * h, &tmp, &mut k3);
            for i in 0..d {
                tmp[i] = x[i] + h * k3[i];
            }
            let u4 = field.eval(&law.rate, t + h, &tmp, &mut k4);
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            rec.energy += h / 6.0 * (u1 * u1 + 2.0 * u2 * u2 + 2.0 * u3 * u3 + u4 * u4);
            steps += 1;
            t = t_start + match &law.stop {
                StopRule::Duration(len) if h < dt => *len,
                _ => steps as f64 * dt,
            };
            check(spec, t, &x)?;
            rec.v_min = rec.v_min.min(x[0]);
            rec.v_max = rec.v_max.max(x[0]);
            rec.xi_min = rec.xi_min.min(x[d - 1]);
            if steps % stride == 0 {
                run.times.push(t);
                run.states.extend_from_slice(&x);
            }
        }
        if run.times.last() != Some(&t) {
            run.times.push(t);
            run.states.extend_from_slice(&x);
        }
        rec.t_end = t;
        run.energy += rec.energy;
        run.phases.push(rec);
    }
    run.terminal_distance = distance(&x, &program.target);
    run.terminal = x;
    Ok(run)
}

// ∫ h'^2 while the input moves linearly from `a` to `b` at rate `r` with the
// HH part frozen: `h' sigma = r - b~_xi`. The signal enters through its mean
// and variance over a period.
fn jump_energy(spec: &ModelSpec, a: f64, b: f64, r: f64) -> Result<f64> {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    match spec {
        ModelSpec::Cir { a: level, signal } => {
            let (mean, var) = signal_moments(signal);
            let c = r - (level - 0.25) - mean;
            let g = |xi: f64| xi * xi / 2.0 + 2.0 * c * xi + (c * c + var) * xi.ln();
            Ok((g(hi) - g(lo)) / r.abs())
        }
        ModelSpec::Ou { signal } => {
            let (mean, var) = signal_moments(signal);
            let c = r - mean;
            let g = |xi: f64| (xi + c).powi(3) / 3.0 + var * xi;
            Ok((g(hi) - g(lo)) / r.abs())
        }
        _ => Err(Error::Config(format!("fast-forward is not defined for the {} model", spec.name()))),
    }
}

fn signal_moments(s: &Signal) -> (f64, f64) {
    let var = s
        .cos_coefficients()
        .iter()
        .chain(s.sin_coefficients())
        .map(|c| c * c / 2.0)
        .sum();
    (s.mean(), var)
}

/// Tuning of the synthesized programs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlParams {
    /// Radius of the gate balls ending phase IV.
    pub epsilon: f64,
    /// Phase V shifts the voltage by `10^-k_shift`.
    pub k_shift: i32,
    /// Phase VI ends once the distance to the target is below this.
    pub hold_tol: f64,
    pub hold_cap: f64,
    /// Hard caps are this multiple of the analytic phase-time estimate.
    pub cap_factor: f64,
    pub ramp_slope: f64,
    pub ramp_order: u32,
    pub stationary_tol: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            epsilon: 1e-3,
            k_shift: 3,
            hold_tol: 1e-2,
            hold_cap: 500.0,
            cap_factor: 10.0,
            ramp_slope: 1.0,
            ramp_order: 5,
            stationary_tol: 1e-10,
        }
    }
}

// h' making the input coordinate move at `target(t, x)`.
fn xi_rate(spec: &ModelSpec, target: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> RateRule {
    let spec = spec.clone();
    RateRule::Feedback(Arc::new(move |t, x| {
        let mut b = [0.0; 5];
        let mut s = [0.0; 5];
        spec.stratonovich_drift(t, x, &mut b);
        spec.diffusion(x, &mut s);
        (target(t, x) - b[4]) / s[4]
    }))
}

// h' making the voltage follow `ramp` started at `t0`: the input moves at
// `r' + F`.
fn track_voltage(spec: &ModelSpec, ramp: Ramp, t0: f64) -> RateRule {
    xi_rate(spec, move |t, x| ramp.eval(t - t0).1 + current_f(x[0], x[1], x[2], x[3]))
}

fn until(g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static, cap: f64, on_cap: CapAction) -> StopRule {
    StopRule::Until { g: Arc::new(g), cap, on_cap }
}

// Time bound for v to enter (-12, 120) with the input held: outside the
// interval |v'| >= 0.3 |v - 10.6|.
fn entry_time_estimate(v: f64) -> f64 {
    let r = if v >= 120.0 {
        (v - 10.6) / (120.0 - 10.6)
    } else if v <= -12.0 {
        (10.6 - v) / (10.6 + 12.0)
    } else {
        1.0
    };
    1.0 + r.ln() / 0.3
}

fn in_trap(v: f64) -> bool {
    v > -12.0 && v < 120.0
}

fn hold_phase(spec: &ModelSpec, name: &str, target: Vec<f64>, p: &ControlParams) -> PhaseTemplate {
    let (tol, cap) = (p.hold_tol, p.hold_cap);
    PhaseTemplate::fixed(
        name,
        PhaseLaw {
            rate: xi_rate(spec, |_, _| 0.0),
            stop: until(move |_, x| distance(x, &target) - tol, cap, CapAction::Report),
            fast_forward: None,
            ramp_distance: 0.0,
        },
    )
}

fn entry_phase(spec: &ModelSpec, p: &ControlParams) -> PhaseTemplate {
    let spec = spec.clone();
    let factor = p.cap_factor;
    PhaseTemplate::new("II", move |_, x| {
        Ok(PhaseLaw {
            rate: xi_rate(&spec, |_, _| 0.0),
            stop: until(|_, x| if in_trap(x[0]) { -1.0 } else { 1.0 }, factor * entry_time_estimate(x[0]), CapAction::Fail),
            fast_forward: None,
            ramp_distance: 0.0,
        })
    })
}

fn settle_estimate(lambda: f64, tol: f64) -> f64 {
    1.0 + (1.0 / tol).ln() / lambda
}

fn voltage_phase(spec: &ModelSpec, target: &[f64], lambda: f64, p: &ControlParams) -> PhaseTemplate {
    let spec = spec.clone();
    let p = *p;
    let gates = [target[1], target[2], target[3]];
    let v_star = target[0];
    PhaseTemplate::new("IV", move |t0, x| {
        let ramp = smooth_ramp(RampSpec { start: x[0], end: v_star, slope: p.ramp_slope, order: p.ramp_order })?;
        let dist = (x[0] - v_star).abs();
        let coast_from = t0 + 121f64.max(ramp.duration());
        let eps = p.epsilon;
        Ok(PhaseLaw {
            rate: track_voltage(&spec, ramp, t0),
            stop: until(
                move |t, x| {
                    let off = (0..3).map(|i| (x[i + 1] - gates[i]).abs()).fold(0.0, f64::max);
                    if t >= coast_from && off < eps { -1.0 } else { 1.0 }
                },
                p.cap_factor * (coast_from - t0 + settle_estimate(lambda, eps)),
                CapAction::Fail,
            ),
            fast_forward: None,
            ramp_distance: dist,
        })
    })
}

// Shifts v by `shift` and lets the input drift at F_inf(v* + shift) until it
// reaches `xi_target`.
fn relaxation_phase(spec: &ModelSpec, v_star: f64, xi_target: f64, lambda: f64, p: &ControlParams) -> PhaseTemplate {
    let spec = spec.clone();
    let p = *p;
    PhaseTemplate::new("V", move |t0, x| {
        let sign = if x[4] > xi_target { -1.0 } else { 1.0 };
        let shift = sign * 10f64.powi(-p.k_shift);
        let ramp = smooth_ramp(RampSpec { start: x[0], end: v_star + shift, slope: shift.abs(), order: p.ramp_order })?;
        let rate = f_infinity(v_star + shift);
        if rate * sign <= 0.0 {
            return Err(Error::Domain(format!("F_inf has the wrong sign at v = {}", v_star + shift)));
        }
        let settle = ramp.duration() + settle_estimate(lambda, p.stationary_tol);
        let travel = (x[4] - xi_target).abs() / rate.abs();
        Ok(PhaseLaw {
            rate: track_voltage(&spec, ramp.clone(), t0),
            stop: until(move |_, x| sign * (xi_target - x[4]), p.cap_factor * (settle + travel), CapAction::Fail),
            fast_forward: Some(FastForward { xi_target, settle_cap: p.cap_factor * settle }),
            ramp_distance: shift.abs(),
        })
    })
}

fn min_relaxation_rate(target: &[f64]) -> f64 {
    rates(target[0]).iter().map(|r: &Rate| r.total()).fold(f64::INFINITY, f64::min)
}

/// Phases II to VI for CIR-HH (phase I only computes the constants). A start
/// at the target gets the final hold phase only.
pub fn synthesize_cir_control(spec: &ModelSpec, x0: &[f64], params: &ControlParams) -> Result<ControlProgram> {
    if !matches!(spec, ModelSpec::Cir { .. }) {
        return Err(Error::Config("synthesize_cir_control needs a CIR-HH model".into()));
    }
    spec.check_state(x0)?;
    let target = spec.target()?;
    let constants = ControlConstants::standard();
    if distance(x0, &target) < 1e-12 {
        return Ok(ControlProgram { phases: vec![hold_phase(spec, "VI", target.clone(), params)], target, constants: Some(constants) });
    }
    let threshold = constants.xi_threshold();
    let lambda = constants.lambda;
    let p = *params;
    let s = spec.clone();
    let climb = PhaseTemplate::new("III", move |_, x| {
        let settle = settle_estimate(lambda, p.stationary_tol);
        Ok(PhaseLaw {
            rate: xi_rate(&s, |_, _| 1.0),
            stop: until(move |_, x| threshold - x[4], p.cap_factor * (settle + (threshold - x[4]).max(0.0)), CapAction::Fail),
            fast_forward: Some(FastForward { xi_target: threshold, settle_cap: p.cap_factor * settle }),
            ramp_distance: 0.0,
        })
    });
    let phases = vec![
        entry_phase(spec, params),
        climb,
        voltage_phase(spec, &target, min_relaxation_rate(&target), params),
        relaxation_phase(spec, target[0], 1.0, min_relaxation_rate(&target), params),
        hold_phase(spec, "VI", target.clone(), params),
    ];
    Ok(ControlProgram { phases, target, constants: Some(constants) })
}

/// The OU-HH analogue: no climb phase, the input is driven to 0.
pub fn synthesize_ou_control(spec: &ModelSpec, x0: &[f64], params: &ControlParams) -> Result<ControlProgram> {
    if !matches!(spec, ModelSpec::Ou { .. }) {
        return Err(Error::Config("synthesize_ou_control needs an OU-HH model".into()));
    }
    spec.check_state(x0)?;
    let target = spec.target()?;
    if distance(x0, &target) < 1e-12 {
        return Ok(ControlProgram { phases: vec![hold_phase(spec, "VI", target.clone(), params)], target, constants: None });
    }
    let lambda = min_relaxation_rate(&target);
    let phases = vec![
        entry_phase(spec, params),
        voltage_phase(spec, &target, lambda, params),
        relaxation_phase(spec, target[0], 0.0, lambda, params),
        hold_phase(spec, "VI", target.clone(), params),
    ];
    Ok(ControlProgram { phases, target, constants: None })
}

pub fn synthesize(spec: &ModelSpec, x0: &[f64], params: &ControlParams) -> Result<ControlProgram> {
    match spec {
        ModelSpec::Cir { .. } => synthesize_cir_control(spec, x0, params),
        ModelSpec::Ou { .. } => synthesize_ou_control(spec, x0, params),
        ModelSpec::Toy { .. } => toy_ramp_program(1.0, 30.0),
        _ => Err(Error::Config(format!("no control construction for the {} model", spec.name()))),
    }
}

/// Toy control with `h'(0) = 1`, decreasing smoothly to 0 at `t0`, then 0 up
/// to `horizon`.
pub fn toy_ramp_program(t0: f64, horizon: f64) -> Result<ControlProgram> {
    if !(t0 > 0.0 && horizon >= t0) {
        return Err(Error::Config(format!("need 0 < t0 <= horizon, got t0 = {t0}, horizon = {horizon}")));
    }
    let step = smoothstep_coefficients(4);
    let rate = RateRule::Explicit(Arc::new(move |t| if t >= t0 { 0.0 } else { 1.0 - horner(&step, (t / t0).max(0.0)) }));
    let law = PhaseLaw { rate, stop: StopRule::Duration(horizon), fast_forward: None, ramp_distance: 0.0 };
    Ok(ControlProgram { phases: vec![PhaseTemplate::fixed("ramp", law)], target: vec![0.0, 2.0 / 3.0], constants: None })
}

/// Random start points for a reachability suite: `v` uniform on `[-60, 150]`,
/// gates uniform on `[0, 1]`, the input uniform on `[0.2, 20]` (CIR) or
/// `[-20, 20]` (OU).
pub fn random_start_points(spec: &ModelSpec, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let xi_range = match spec {
        ModelSpec::Cir { .. } => 0.2..=20.0,
        ModelSpec::Ou { .. } => -20.0..=20.0,
        _ => return Err(Error::Config(format!("no start-point suite for the {} model", spec.name()))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            vec![
                rng.random_range(-60.0..=150.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(xi_range.clone()),
            ]
        })
        .collect())
}

/// Synthesizes and integrates one program per start point, in parallel.
pub fn run_suite(
    spec: &ModelSpec,
    starts: &[Vec<f64>],
    params: &ControlParams,
    opts: &IntegrateOptions,
) -> Result<Vec<ControlRun>> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            synthesize(spec, x0, params)
                .and_then(|prog| integrate_control(spec, x0, &prog, opts))
                .map_err(|e| Error::Replica { replica: i, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_signal, gate_equilibrium, Gate};

    #[test]
    fn constant_ramp() {
        let r = smooth_ramp(RampSpec::new(2.0, 2.0)).unwrap();
        for t in [0.0, 0.3, 1.0, 5.0] {
            assert_eq!(r.eval(t), (2.0, 0.0));
        }
    }

    #[test]
    fn ramp_invariants() {
        for (a, b, slope) in [(4.0, 1.0, 1.0), (0.0, 0.3, 1.0), (-3.0, 10.0, 2.0), (1.0, 0.999, 1e-3)] {
            let r = smooth_ramp(RampSpec { start: a, end: b, slope, order: 5 }).unwrap();
            let d = (b - a).abs() / slope + 1.0;
            assert_eq!(r.eval(0.0).0, a);
            assert_eq!(r.eval(d).0, b);
            assert_eq!(r.eval(d + 7.0), (b, 0.0));
            let n = 20_000;
            let mut tv = 0.0;
            let mut prev = r.eval(0.0).0;
            for k in 1..=n {
                let t = d * k as f64 / n as f64;
                let (v, dv) = r.eval(t);
                assert!(dv.abs() <= slope * (1.0 + 1e-12));
                tv += (v - prev).abs();
                prev = v;
            }
            assert!((tv - (b - a).abs()).abs() < 1e-6, "{tv}");
            // r' integrates to r
            let mut acc = a;
            let h = d / n as f64;
            for k in 0..n {
                let t = k as f64 * h;
                acc += h / 6.0 * (r.eval(t).1 + 4.0 * r.eval(t + h / 2.0).1 + r.eval(t + h).1);
            }
            assert!((acc - b).abs() < 1e-9);
        }
    }

    #[test]
    fn four_to_one_settles_by_four() {
        let r = smooth_ramp(RampSpec::new(4.0, 1.0)).unwrap();
        assert!((r.duration() - 4.0).abs() < 1e-15);
        assert_eq!(r.eval(4.0).0, 1.0);
    }

    #[test]
    fn smoothstep_is_flat_at_the_ends() {
        let c = smoothstep_coefficients(4);
        assert!((horner(&c, 1.0) - 1.0).abs() < 1e-12);
        assert!((horner(&c, 0.5) - 0.5).abs() < 1e-12);
        let d1: Vec<f64> = c.iter().enumerate().skip(1).map(|(j, a)| a * j as f64).collect();
        assert!(horner(&d1, 1.0).abs() < 1e-9);
    }

    #[test]
    fn constants() {
        let k = ControlConstants::standard();
        assert!(k.f >= current_f(120.0, 1.0, 0.0, 0.0));
        assert!(k.lambda > 0.0);
        assert!((k.k as f64 - 121.0) * (1.0 + k.f) - k.c / k.lambda > 1.0);
        let tight = (k.k as f64 - 3.0 - 121.0) * (1.0 + k.f) - k.c / k.lambda;
        assert!(tight <= 1.0);
    }

    #[test]
    fn zero_control_at_ou_equilibrium() {
        let spec = ModelSpec::ou(Signal::constant(0.0, 10.0).unwrap());
        let x0 = spec.target().unwrap();
        let law = PhaseLaw {
            rate: RateRule::Explicit(Arc::new(|_| 0.0)),
            stop: StopRule::Duration(10.0),
            fast_forward: None,
            ramp_distance: 0.0,
        };
        let prog = ControlProgram { phases: vec![PhaseTemplate::fixed("zero", law)], target: x0.clone(), constants: None };
        let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions::default()).unwrap();
        assert!(run.terminal_distance < 1e-8);
        assert!((run.phases[0].t_end - 10.0).abs() < 1e-12);
    }

    #[test]
    fn toy_ramp_reaches_target() {
        let spec = ModelSpec::toy(1.0).unwrap();
        let prog = toy_ramp_program(1.0, 30.0).unwrap();
        for x0 in [[3.0, 0.0], [-2.0, 5.0], [0.0, 0.1]] {
            let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions::default()).unwrap();
            assert!(run.terminal_distance < 1e-3, "{:?}", run.terminal);
            assert!((run.phases[0].t_end - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hold_keeps_xi_fixed() {
        let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
        let x0 = [200.0, 0.3, 0.4, 0.5, 4.0];
        let p = ControlParams::default();
        let prog = ControlProgram { phases: vec![entry_phase(&spec, &p)], target: spec.target().unwrap(), constants: None };
        let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions::default()).unwrap();
        for k in 0..run.len() {
            assert!((run.state(k)[4] - 4.0).abs() < 1e-8);
        }
        assert!(in_trap(run.terminal[0]));
        assert!(run.phases[0].t_end > 0.0);
    }

    #[test]
    fn cir_start_at_target_is_trivial() {
        let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
        let x = spec.target().unwrap();
        let prog = synthesize_cir_control(&spec, &x, &ControlParams::default()).unwrap();
        let run = integrate_control(&spec, &x, &prog, &IntegrateOptions::default()).unwrap();
        assert_eq!(run.total_ramp_distance(), 0.0);
        assert!(run.terminal_distance < 1e-6);
    }

    #[test]
    fn cir_program_reaches_target() {
        let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
        let x0 = [50.0, 0.5, 0.5, 0.5, 4.0];
        let prog = synthesize_cir_control(&spec, &x0, &ControlParams::default()).unwrap();
        assert_eq!(prog.phase_names(), ["II", "III", "IV", "V", "VI"]);
        let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions { record_stride: 50, ..Default::default() }).unwrap();
        assert!(run.converged);
        assert!(run.terminal_distance < 1e-2, "{:?}", run.terminal);
        let p3 = &run.phases[1];
        assert!(p3.v_min > -12.0 && p3.v_max < 120.0);
        assert!(run.phases.iter().all(|p| p.xi_min > 0.0));
        assert!(run.phases[3].xi_min >= 1.0 - 1e-12);
        assert!(run.energy.is_finite() && run.energy > 0.0);
    }

    #[test]
    fn ou_program_reaches_target() {
        let spec = ModelSpec::ou(default_signal());
        let x0 = [-40.0, 0.2, 0.9, 0.1, 3.0];
        let prog = synthesize_ou_control(&spec, &x0, &ControlParams::default()).unwrap();
        let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions { record_stride: 50, ..Default::default() }).unwrap();
        assert!(run.converged);
        assert!(run.terminal_distance < 1e-2, "{:?}", run.terminal);
        assert!(run.terminal[4].abs() < 1e-2);
    }

    #[test]
    fn ou_hold_law_is_exact() {
        let spec = ModelSpec::ou(default_signal());
        let rate = xi_rate(&spec, |_, _| 0.0);
        let law = PhaseLaw { rate, stop: StopRule::Duration(20.0), fast_forward: None, ramp_distance: 0.0 };
        let prog = ControlProgram { phases: vec![PhaseTemplate::fixed("hold", law)], target: spec.target().unwrap(), constants: None };
        let x0 = [5.0, 0.3, 0.1, 0.6, 2.5];
        let run = integrate_control(&spec, &x0, &prog, &IntegrateOptions::default()).unwrap();
        for k in 0..run.len() {
            assert!((run.state(k)[4] - 2.5).abs() < 1e-8);
        }
    }

    #[test]
    fn target_gates_match_equilibria() {
        let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
        let x = spec.target().unwrap();
        for g in Gate::ALL {
            assert!((x[g.index()] - gate_equilibrium(g, x[0])).abs() < 1e-15);
        }
    }
}

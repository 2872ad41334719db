//! Euler–Maruyama path simulation with full truncation for the CIR input.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gate, ModelSpec};

/// Default step in ms.
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    EulerMaruyama,
    CirFullTruncation,
}

impl Scheme {
    pub fn for_model(spec: &ModelSpec) -> Scheme {
        match spec {
            ModelSpec::Cir { .. } => Scheme::CirFullTruncation,
            _ => Scheme::EulerMaruyama,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub horizon: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(spec: &ModelSpec, dt: f64, horizon: f64, seed: u64) -> SimConfig {
        SimConfig { dt, scheme: Scheme::for_model(spec), horizon, seed }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if matches!(spec, ModelSpec::Cir { .. }) && self.scheme != Scheme::CirFullTruncation {
            return Err(Error::Config("CIR mode requires the cir-full-truncation scheme".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Generator for replica `replica` of a run seeded with `seed`.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Where Brownian increments come from.
pub enum Noise<'a> {
    Rng(&'a mut ChaCha8Rng),
    Zero,
    /// Prescribed increments `dW_k`, one per step.
    Given(&'a [f64]),
}

impl Noise<'_> {
    fn next(&mut self, k: usize, sqrt_dt: f64) -> Result<f64> {
        match self {
            Noise::Rng(rng) => {
                let z: f64 = StandardNormal.sample(*rng);
                Ok(z * sqrt_dt)
            }
            Noise::Zero => Ok(0.0),
            Noise::Given(w) => w.get(k).copied().ok_or_else(|| {
                Error::InsufficientData(format!("only {} noise increments supplied", w.len()))
            }),
        }
    }
}

/// Counts of discretization corrections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    /// Steps after which the raw CIR iterate was negative.
    pub truncations: u64,
    /// Gate values clamped back into `[0, 1]`.
    pub clamps: u64,
}

impl Events {
    pub fn merge(self, o: Events) -> Events {
        Events { truncations: self.truncations + o.truncations, clamps: self.clamps + o.clamps }
    }
}

/// Single-path Euler–Maruyama integrator holding the raw iterate.
pub struct Stepper<'m> {
    spec: &'m ModelSpec,
    dt: f64,
    sqrt_dt: f64,
    t0: f64,
    t: f64,
    steps: usize,
    x: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    events: Events,
}

impl<'m> Stepper<'m> {
    pub fn new(spec: &'m ModelSpec, x0: &[f64], t0: f64, dt: f64) -> Result<Stepper<'m>> {
        spec.validate()?;
        spec.check_state(x0)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let d = spec.dim();
        Ok(Stepper {
            spec,
            dt,
            sqrt_dt: dt.sqrt(),
            t0,
            t: t0,
            steps: 0,
            x: x0.to_vec(),
            b: vec![0.0; d],
            s: vec![0.0; d],
            events: Events::default(),
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn events(&self) -> Events {
        self.events
    }

    /// Raw iterate; the CIR input may be slightly negative.
    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Current state with the CIR input shown as `max(xi, 0)`.
    pub fn reported_state(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.x);
        if let ModelSpec::Cir { .. } = self.spec {
            out[4] = out[4].max(0.0);
        }
    }

    /// One step driven by the increment `dw`.
    pub fn step_with(&mut self, dw: f64) -> Result<()> {
        let t = self.t;
        self.spec.drift(t, &self.x, &mut self.b);
        self.spec.diffusion(&self.x, &mut self.s);
        for ((x, b), s) in self.x.iter_mut().zip(&self.b).zip(&self.s) {
            *x += b * self.dt + s * dw;
        }
        self.steps += 1;
        // t0 + k dt rather than an accumulated sum keeps grids exact.
        self.t = self.t0 + self.steps as f64 * self.dt;
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: self.steps });
        }
        if self.x.len() >= 4 {
            for g in Gate::ALL {
                let j = &mut self.x[g.index()];
                if *j < 0.0 || *j > 1.0 {
                    *j = j.clamp(0.0, 1.0);
                    self.events.clamps += 1;
                }
            }
        }
        if matches!(self.spec, ModelSpec::Cir { .. }) && self.x[4] < 0.0 {
            self.events.truncations += 1;
        }
        Ok(())
    }

    pub fn step(&mut self, noise: &mut Noise) -> Result<()> {
        let dw = noise.next(self.steps, self.sqrt_dt)?;
        self.step_with(dw)
    }

    /// Advances `n` steps without recording.
    pub fn advance(&mut self, n: usize, noise: &mut Noise) -> Result<()> {
        for _ in 0..n {
            self.step(noise)?;
        }
        Ok(())
    }
}

/// A discretized trajectory with the increments that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    /// Row-major, `(noise.len() + 1) * dim` values.
    pub states: Vec<f64>,
    pub noise: Vec<f64>,
    pub seed: u64,
    pub events: Events,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.states.chunks(self.dim).enumerate().map(|(k, x)| (self.time(k), x))
    }

    /// Coordinate names for exports.
    pub fn column_names(&self) -> Vec<&'static str> {
        match self.dim {
            2 => vec!["t", "xi", "psi"],
            4 => vec!["t", "v", "n", "m", "h"],
            5 => vec!["t", "v", "n", "m", "h", "xi"],
            _ => vec!["t"],
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut names = self.column_names();
        if names.len() != self.dim + 1 {
            names = vec!["t"];
        }
        let mut header: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        for i in header.len()..=self.dim {
            header.push(format!("x{i}"));
        }
        wr.write_record(&header)?;
        for (t, x) in self.iter() {
            let mut row = Vec::with_capacity(self.dim + 1);
            row.push(format!("{t:?}"));
            row.extend(x.iter().map(|v| format!("{v:?}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Binary frame: `b"PHPR"`, version `u32`, `d` as `u32`, row count
    /// `u64`, then rows `[t, x1..xd]` of `f64`, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (t, x) in self.iter() {
            w.write_all(&t.to_le_bytes())?;
            for v in x {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub const BINARY_MAGIC: &[u8; 4] = b"PHPR";
pub const BINARY_VERSION: u32 = 1;

/// Reads a binary frame back as `(d, rows)` with rows `[t, x1..xd]`.
pub fn read_binary<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Io("not a PHPR path frame".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != BINARY_VERSION {
        return Err(Error::Io(format!("unsupported PHPR version {version}")));
    }
    r.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(d + 1);
        for _ in 0..=d {
            r.read_exact(&mut b8)?;
            row.push(f64::from_le_bytes(b8));
        }
        rows.push(row);
    }
    Ok((d, rows))
}

/// Simulates `config.horizon / config.dt` steps from `(t0, x0)` with the
/// generator of stream 0 under `config.seed`.
pub fn simulate_path(spec: &ModelSpec, x0: &[f64], t0: f64, config: &SimConfig) -> Result<PathRecord> {
    let mut rng = replica_rng(config.seed, 0);
    simulate_path_with(spec, x0, t0, config, Noise::Rng(&mut rng))
}

pub fn simulate_path_with(
    spec: &ModelSpec,
    x0: &[f64],
    t0: f64,
    config: &SimConfig,
    mut noise: Noise,
) -> Result<PathRecord> {
    config.validate(spec)?;
    let n = config.steps();
    let d = spec.dim();
    let mut st = Stepper::new(spec, x0, t0, config.dt)?;
    let mut states = Vec::with_capacity((n + 1) * d);
    let mut buf = vec![0.0; d];
    st.reported_state(&mut buf);
    states.extend_from_slice(&buf);
    let mut increments = Vec::with_capacity(n);
    for _ in 0..n {
        let dw = noise.next(st.steps_taken(), st.sqrt_dt)?;
        st.step_with(dw)?;
        increments.push(dw);
        st.reported_state(&mut buf);
        states.extend_from_slice(&buf);
    }
    Ok(PathRecord {
        t0,
        dt: config.dt,
        dim: d,
        states,
        noise: increments,
        seed: config.seed,
        events: st.events(),
    })
}

/// Steps per drift period for a requested `dt`; the effective step is
/// `T / steps`.
pub fn steps_per_period(spec: &ModelSpec, dt: f64) -> Result<(usize, f64)> {
    let period = spec
        .period()
        .ok_or_else(|| Error::Config(format!("{} model has no drift period", spec.name())))?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n = (period / dt).round().max(1.0) as usize;
    Ok((n, period / n as f64))
}

/// `X_T, X_2T, ..., X_kT` along one path started at time 0.
pub fn simulate_skeleton(
    spec: &ModelSpec,
    x0: &[f64],
    k: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let (n, dt) = steps_per_period(spec, dt)?;
    let mut st = Stepper::new(spec, x0, 0.0, dt)?;
    let mut out = Vec::with_capacity(k);
    let mut noise = Noise::Rng(rng);
    let mut buf = vec![0.0; spec.dim()];
    for _ in 0..k {
        st.advance(n, &mut noise)?;
        st.reported_state(&mut buf);
        out.push(buf.clone());
    }
    Ok(out)
}

/// State at `horizon` without recording the path.
pub fn simulate_terminal(
    spec: &ModelSpec,
    x0: &[f64],
    t0: f64,
    horizon: f64,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Events)> {
    let n = (horizon / dt).round() as usize;
    let mut st = Stepper::new(spec, x0, t0, dt)?;
    st.advance(n, &mut Noise::Rng(rng))?;
    let mut out = vec![0.0; spec.dim()];
    st.reported_state(&mut out);
    Ok((out, st.events()))
}

/// One draw from the resolvent kernel: the skeleton observed after
/// `K ~ Geometric` periods with `P(K = k) = (1 - p) p^(k-1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolventDraw {
    pub k: u64,
    pub state: Vec<f64>,
}

pub fn resolvent_sample(
    spec: &ModelSpec,
    x0: &[f64],
    p: f64,
    count: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<ResolventDraw>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("resolvent parameter p must lie in (0, 1), got {p}")));
    }
    let geo = Geometric::new(1.0 - p).map_err(|e| Error::Config(e.to_string()))?;
    let (n, dt) = steps_per_period(spec, dt)?;
    par_replicas(count, |r| {
        let mut rng = replica_rng(seed, r as u64);
        let k = 1 + geo.sample(&mut rng);
        let mut st = Stepper::new(spec, x0, 0.0, dt)?;
        st.advance(n * k as usize, &mut Noise::Rng(&mut rng))?;
        let mut state = vec![0.0; spec.dim()];
        st.reported_state(&mut state);
        Ok(ResolventDraw { k, state })
    })
}

/// Runs `f(0..count)` in parallel, tagging failures with the replica index.
/// Results keep replica order.
pub fn par_replicas<T: Send>(
    count: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..count)
        .into_par_iter()
        .map(|r| f(r).map_err(|e| Error::Replica { replica: r, source: Box::new(e) }))
        .collect()
}

/// Mean and variance of the toy `xi_t` started at `xi0` at time 0.
///
/// `mean = xi0 exp(-S(t))` and `variance = ∫_0^t exp(-2 (S(t) - S(r))) dr`
/// with `S(t) = c (t/2 - sin(4 pi t) / (8 pi))`.
pub fn toy_closed_form(c: f64, xi0: f64, t: f64) -> (f64, f64) {
    let s = |u: f64| toy_forcing_integral(c, u);
    let st = s(t);
    let var = adaptive_simpson(&|r: f64| (-2.0 * (st - s(r))).exp(), 0.0, t, 1e-12, 40);
    (xi0 * (-st).exp(), var)
}

/// `c ∫_0^t sin^2(2 pi r) dr`.
pub fn toy_forcing_integral(c: f64, t: f64) -> f64 {
    use std::f64::consts::PI;
    c * (t / 2.0 - (4.0 * PI * t).sin() / (8.0 * PI))
}

pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Draws a standard normal; shared by modules that build their own noise.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

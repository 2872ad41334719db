//! Lyapunov drift checks and ergodic averages.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{hh_equilibrium, ModelSpec};
use crate::sde::{par_replicas, replica_rng, simulate_terminal, steps_per_period, Noise, Stepper};

/// Even C² bump: `3/8 + 3/4 y² - 1/8 y⁴` on `[-1, 1]`, `|y|` outside.
pub fn psi(y: f64) -> f64 {
    if y.abs() <= 1.0 {
        let y2 = y * y;
        0.375 + 0.75 * y2 - 0.125 * y2 * y2
    } else {
        y.abs()
    }
}

/// `1 + log²(xi) + xi² + psi(v)` for CIR-HH, `1 + xi² + psi(v)` for OU-HH.
pub fn eval_v(spec: &ModelSpec, x: &[f64]) -> Result<f64> {
    match spec {
        ModelSpec::Cir { .. } => {
            let xi = x[4];
            if xi <= 0.0 {
                return Err(Error::Domain(format!("V needs xi > 0 in CIR mode, got {xi}")));
            }
            Ok(1.0 + xi.ln().powi(2) + xi * xi + psi(x[0]))
        }
        ModelSpec::Ou { .. } => Ok(1.0 + x[4] * x[4] + psi(x[0])),
        _ => Err(Error::Config(format!("no Lyapunov function for the {} model", spec.name()))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftPoint {
    pub x: Vec<f64>,
    pub v: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `P_{0,T} V(x)` with its standard error.
///
/// Replica `r` uses generator stream `stream_offset + r`.
pub fn mc_drift_estimate(
    spec: &ModelSpec,
    x: &[f64],
    horizon: f64,
    replicas: usize,
    dt: f64,
    seed: u64,
    stream_offset: u64,
) -> Result<DriftPoint> {
    let v = eval_v(spec, x)?;
    if replicas < 2 {
        return Err(Error::Config(format!("need at least 2 replicas, got {replicas}")));
    }
    if horizon == 0.0 {
        return Ok(DriftPoint { x: x.to_vec(), v, estimate: v, stderr: 0.0 });
    }
    let samples: Vec<f64> = par_replicas(replicas, |r| {
        let mut rng = replica_rng(seed, stream_offset + r as u64);
        let (mut y, _) = simulate_terminal(spec, x, 0.0, horizon, dt, &mut rng)?;
        if let ModelSpec::Cir { .. } = spec {
            // A truncated iterate has no logarithm; the next step would
            // restore positivity.
            y[4] = y[4].max(f64::MIN_POSITIVE);
        }
        eval_v(spec, &y)
    })?;
    let (mean, se) = mean_stderr(&samples);
    Ok(DriftPoint { x: x.to_vec(), v, estimate: mean, stderr: se })
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftFit {
    pub lambda: f64,
    pub delta: f64,
    /// Standard error of `lambda`: residual scatter and Monte Carlo error
    /// of the estimates, combined in quadrature.
    pub lambda_stderr: f64,
    pub used: usize,
    /// Indices of points with `estimate - 3 stderr > lambda V + delta`.
    pub violations: Vec<usize>,
}

/// Least-squares fit of `estimate ≈ lambda V + delta` with `lambda, delta >= 0`
/// over points with `V > v_floor`.
pub fn fit_drift_inequality(points: &[DriftPoint], v_floor: f64) -> Result<DriftFit> {
    let used: Vec<usize> = (0..points.len()).filter(|&i| points[i].v > v_floor).collect();
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "drift fit needs at least 3 points above the floor, got {}",
            used.len()
        )));
    }
    let n = used.len() as f64;
    let vbar = used.iter().map(|&i| points[i].v).sum::<f64>() / n;
    let ybar = used.iter().map(|&i| points[i].estimate).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|&i| (points[i].v - vbar).powi(2)).sum();
    if sxx <= 1e-12 * (1.0 + vbar * vbar) * n {
        return Err(Error::InsufficientData("degenerate design: all V values are equal".into()));
    }
    let sxy: f64 = used.iter().map(|&i| (points[i].v - vbar) * (points[i].estimate - ybar)).sum();
    let (mut lambda, mut delta) = (sxy / sxx, 0.0);
    delta += ybar - lambda * vbar;
    if lambda < 0.0 {
        lambda = 0.0;
        delta = ybar;
    }
    if delta < 0.0 {
        let svv: f64 = used.iter().map(|&i| points[i].v.powi(2)).sum();
        let svy: f64 = used.iter().map(|&i| points[i].v * points[i].estimate).sum();
        lambda = (svy / svv).max(0.0);
        delta = 0.0;
    }
    let rss: f64 = used
        .iter()
        .map(|&i| (points[i].estimate - lambda * points[i].v - delta).powi(2))
        .sum();
    let resid_var = if used.len() > 2 { rss / (n - 2.0) } else { 0.0 };
    let mc_var: f64 = used
        .iter()
        .map(|&i| ((points[i].v - vbar) / sxx).powi(2) * points[i].stderr.powi(2))
        .sum();
    let lambda_stderr = (resid_var / sxx + mc_var).sqrt();
    let violations = (0..points.len())
        .filter(|&i| points[i].estimate - 3.0 * points[i].stderr > lambda * points[i].v + delta)
        .collect();
    Ok(DriftFit { lambda, delta, lambda_stderr, used: used.len(), violations })
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub model: String,
    pub horizon: f64,
    pub replicas: usize,
    pub seed: u64,
    pub dt: f64,
    pub v_floor: f64,
    pub points: Vec<DriftPoint>,
    pub fit: DriftFit,
}

/// Estimates `P_{0,T} V` at every point and fits the drift inequality.
#[allow(clippy::too_many_arguments)]
pub fn drift_report(
    spec: &ModelSpec,
    points: &[Vec<f64>],
    horizon: f64,
    replicas: usize,
    dt: f64,
    seed: u64,
    v_floor: f64,
) -> Result<DriftReport> {
    let est: Vec<DriftPoint> = points
        .iter()
        .enumerate()
        .map(|(i, x)| mc_drift_estimate(spec, x, horizon, replicas, dt, seed, (i * replicas) as u64))
        .collect::<Result<_>>()?;
    let fit = fit_drift_inequality(&est, v_floor)?;
    Ok(DriftReport {
        model: spec.name().to_string(),
        horizon,
        replicas,
        seed,
        dt,
        v_floor,
        points: est,
        fit,
    })
}

/// Twenty test points: five near the rest state, five with large |v|, five
/// with large xi, and five with xi near 0 (CIR) or large negative xi (OU).
pub fn default_test_points(spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let [v0, n0, m0, h0] = hh_equilibrium(0.0)?;
    let cir = matches!(spec, ModelSpec::Cir { .. });
    let xi_rest = if cir { 1.0 } else { 0.0 };
    let mut pts = Vec::with_capacity(20);
    for (dv, dxi) in [(0.0, 0.0), (0.5, 0.2), (-0.5, 0.3), (1.0, 0.5), (-1.0, 0.1)] {
        pts.push(vec![v0 + dv, n0, m0, h0, xi_rest + dxi]);
    }
    for v in [-40.0, 60.0, 90.0, 120.0, 150.0] {
        pts.push(vec![v, 0.5, 0.5, 0.5, xi_rest + 1.0]);
    }
    for xi in [10.0, 20.0, 30.0, 40.0, 50.0] {
        pts.push(vec![v0, n0, m0, h0, xi]);
    }
    let tail: [f64; 5] = if cir { [1e-3, 3e-3, 1e-2, 3e-2, 0.1] } else { [-10.0, -20.0, -30.0, -40.0, -50.0] };
    for xi in tail {
        pts.push(vec![v0, n0, m0, h0, xi]);
    }
    if let Some(p) = pts.iter().find(|p| spec.check_state(p).is_err()) {
        return Err(Error::Domain(format!("test point {p:?} is outside the state space")));
    }
    Ok(pts)
}

/// Partial averages `(1/j) sum_(k<=j) G(X_kT)`, `j = 1..=n`, along one path.
pub fn ergodic_average_skeleton(
    spec: &ModelSpec,
    x0: &[f64],
    g: impl Fn(&[f64]) -> f64,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let (per, dt) = steps_per_period(spec, dt)?;
    let mut rng = replica_rng(seed, 0);
    let mut noise = Noise::Rng(&mut rng);
    let mut st = Stepper::new(spec, x0, 0.0, dt)?;
    let mut buf = vec![0.0; spec.dim()];
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(n);
    for j in 1..=n {
        st.advance(per, &mut noise)?;
        st.reported_state(&mut buf);
        sum += g(&buf);
        out.push(sum / j as f64);
    }
    Ok(out)
}

/// Trapezoidal running averages `(1/t) ∫_0^t F(s, X_s) ds` reported at the
/// given checkpoints.
pub fn ergodic_average_continuous(
    spec: &ModelSpec,
    x0: &[f64],
    f: impl Fn(f64, &[f64]) -> f64,
    checkpoints: &[f64],
    dt: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut cps = checkpoints.to_vec();
    cps.sort_by(f64::total_cmp);
    if cps.first().is_some_and(|&c| c <= 0.0) {
        return Err(Error::Config("checkpoints must be positive".into()));
    }
    let mut rng = replica_rng(seed, 0);
    let mut noise = Noise::Rng(&mut rng);
    let mut st = Stepper::new(spec, x0, 0.0, dt)?;
    let mut buf = x0.to_vec();
    let mut prev = f(0.0, &buf);
    let mut integral = 0.0;
    let mut out = Vec::with_capacity(cps.len());
    for c in cps {
        let target = (c / dt).round() as usize;
        while st.steps_taken() < target {
            st.step(&mut noise)?;
            st.reported_state(&mut buf);
            let cur = f(st.time(), &buf);
            integral += 0.5 * (prev + cur) * dt;
            prev = cur;
        }
        out.push((st.time(), integral / st.time()));
    }
    Ok(out)
}

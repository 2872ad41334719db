//! Spikes as excursions of the gating variables into `{m > h}`.
//!
//! `tau_n = inf{t > sigma_(n-1) : m_t > h_t}` and
//! `sigma_n = inf{t > tau_n + delta : m_t < h_t}` with `sigma_0` the start
//! of the path. On a grid the infima are located by linear interpolation of
//! `m - h` between neighbouring samples.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sde::{par_replicas, replica_rng, Noise, Stepper};

/// Default refractory period in ms.
pub const DEFAULT_REFRACTORY: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    Spike,
    Between,
    Boundary,
}

/// Region of a state `(v, n, m, h, ...)`.
pub fn classify(x: &[f64]) -> Region {
    let (m, h) = (x[2], x[3]);
    if m > h {
        Region::Spike
    } else if m < h {
        Region::Between
    } else {
        Region::Boundary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeTrain {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub delta: f64,
    /// Entry time of a final spike whose exit was not observed.
    pub open_tau: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub source: u64,
}

impl SpikeTrain {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Number of dropped (unfinished) events, 0 or 1.
    pub fn truncated(&self) -> usize {
        self.open_tau.is_some() as usize
    }

    pub fn isis(&self) -> Vec<f64> {
        self.taus.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Spikes entered before `t`, counting an unfinished final one.
    pub fn count_before(&self, t: f64) -> usize {
        self.taus.partition_point(|&x| x < t) + self.open_tau.is_some_and(|x| x < t) as usize
    }

    /// Fraction of `[t_start, t_end]` spent in `[tau_n, sigma_n]`.
    pub fn occupation_fraction(&self) -> f64 {
        let span = self.t_end - self.t_start;
        if span <= 0.0 {
            return 0.0;
        }
        let closed: f64 = self.taus.iter().zip(&self.sigmas).map(|(a, b)| b - a).sum();
        let open = self.open_tau.map_or(0.0, |t| self.t_end - t);
        (closed + open) / span
    }

    /// Windows `[t_start + kT, t_start + (k+1)T)` lying inside the observed
    /// span: `(total, spike_free)`.
    pub fn spike_free_windows(&self, period: f64) -> (usize, usize) {
        let total = ((self.t_end - self.t_start) / period).floor() as usize;
        let mut busy = vec![false; total];
        let mut mark = |a: f64, b: f64| {
            if total == 0 {
                return;
            }
            let lo = ((a - self.t_start) / period).floor().max(0.0) as usize;
            let hi = ((b - self.t_start) / period).floor().max(0.0) as usize;
            for k in lo..=hi.min(total - 1) {
                busy[k] = true;
            }
        };
        for (a, b) in self.taus.iter().zip(&self.sigmas) {
            mark(*a, *b);
        }
        if let Some(a) = self.open_tau {
            mark(a, self.t_end);
        }
        (total, busy.iter().filter(|b| !**b).count())
    }

    /// CSV with columns `n, tau, sigma, isi`; `isi` is empty on the last row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "tau", "sigma", "isi"])?;
        for (i, (t, s)) in self.taus.iter().zip(&self.sigmas).enumerate() {
            let isi = self.taus.get(i + 1).map(|n| format!("{:?}", n - t)).unwrap_or_default();
            wr.write_record(&[(i + 1).to_string(), format!("{t:?}"), format!("{s:?}"), isi])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Waiting { since: f64 },
    Spiking { tau: f64 },
}

/// Online version of the stopping-time recursion.
#[derive(Debug, Clone)]
pub struct SpikeDetector {
    delta: f64,
    phase: Phase,
    prev: Option<(f64, f64)>,
    taus: Vec<f64>,
    sigmas: Vec<f64>,
    t_start: f64,
}

fn zero_crossing(t0: f64, g0: f64, t1: f64, g1: f64) -> f64 {
    if g0 == g1 {
        return t0;
    }
    t0 + (t1 - t0) * (g0 / (g0 - g1))
}

impl SpikeDetector {
    pub fn new(delta: f64, t_start: f64) -> Result<SpikeDetector> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("refractory period must be positive, got {delta}")));
        }
        Ok(SpikeDetector {
            delta,
            phase: Phase::Waiting { since: t_start },
            prev: None,
            taus: Vec::new(),
            sigmas: Vec::new(),
            t_start,
        })
    }

    pub fn spikes(&self) -> usize {
        self.taus.len() + matches!(self.phase, Phase::Spiking { .. }) as usize
    }

    pub fn completed(&self) -> usize {
        self.taus.len()
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Feeds the sample `g = m - h` at time `t`.
    pub fn push(&mut self, t: f64, g: f64) {
        if let Some((tp, gp)) = self.prev {
            match self.phase {
                Phase::Waiting { since } => {
                    if g > 0.0 && t > since {
                        let c = if gp <= 0.0 { zero_crossing(tp, gp, t, g) } else { tp };
                        self.phase = Phase::Spiking { tau: since.max(c) };
                    }
                }
                Phase::Spiking { tau } => {
                    let gate = tau + self.delta;
                    if g < 0.0 && t > gate {
                        let c = if gp >= 0.0 { zero_crossing(tp, gp, t, g) } else { tp };
                        let sigma = gate.max(c);
                        self.taus.push(tau);
                        self.sigmas.push(sigma);
                        self.phase = Phase::Waiting { since: sigma };
                    }
                }
            }
        }
        self.prev = Some((t, g));
    }

    pub fn push_state(&mut self, t: f64, x: &[f64]) {
        self.push(t, x[2] - x[3]);
    }

    pub fn finish(self, source: u64) -> SpikeTrain {
        let t_end = self.prev.map_or(self.t_start, |p| p.0);
        let open_tau = match self.phase {
            Phase::Spiking { tau } => Some(tau),
            Phase::Waiting { .. } => None,
        };
        SpikeTrain {
            taus: self.taus,
            sigmas: self.sigmas,
            delta: self.delta,
            open_tau,
            t_start: self.t_start,
            t_end,
            source,
        }
    }
}

/// Runs the detector over a recorded path.
pub fn detect_spikes(path: &crate::sde::PathRecord, delta: f64) -> Result<SpikeTrain> {
    if path.dim < 4 {
        return Err(Error::DimensionMismatch("spike detection needs gating variables".into()));
    }
    let mut det = SpikeDetector::new(delta, path.t0)?;
    for (t, x) in path.iter() {
        det.push_state(t, x);
    }
    Ok(det.finish(path.seed))
}

/// Right-continuous step function `F(t) = #{samples <= t} / n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCdf {
    samples: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Result<EmpiricalCdf> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("empirical CDF needs at least one sample".into()));
        }
        if samples.iter().any(|s| s.is_nan()) {
            return Err(Error::InsufficientData("NaN sample".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.samples.partition_point(|&s| s <= t) as f64 / self.samples.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["isi", "cdf"])?;
        let n = self.samples.len() as f64;
        for (i, s) in self.samples.iter().enumerate() {
            wr.write_record(&[format!("{s:?}"), format!("{:?}", (i + 1) as f64 / n)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Empirical CDF of the interspike intervals `tau_(j+1) - tau_j`.
pub fn isi_cdf(train: &SpikeTrain) -> Result<EmpiricalCdf> {
    if train.taus.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 spikes for an ISI distribution, got {}",
            train.taus.len()
        )));
    }
    EmpiricalCdf::new(train.isis())
}

/// `sup_t |F_a(t) - F_b(t)|`, exact over the merged jump points.
pub fn ks_distance(a: &EmpiricalCdf, b: &EmpiricalCdf) -> f64 {
    ks_sorted(&a.samples, &b.samples)
}

fn ks_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Settings for [`gc_report`].
#[derive(Debug, Clone, Serialize)]
pub struct GcConfig {
    /// ISIs to collect per replica.
    pub total_isis: usize,
    pub block: usize,
    pub delta: f64,
    pub dt: f64,
    pub seed: u64,
    pub replicas: usize,
    /// Hard cap on simulated time per replica (ms).
    pub max_time: f64,
    /// First spike-count checkpoint; later ones double it.
    pub checkpoint_base: f64,
}

impl GcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block < 100 {
            return Err(Error::Config(format!("block must be >= 100, got {}", self.block)));
        }
        if self.total_isis < self.block {
            return Err(Error::Config("total ISI count must be at least one block".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("need at least one replica".into()));
        }
        if !(self.max_time > 0.0 && self.checkpoint_base > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("time caps, checkpoints and dt must be positive".into()));
        }
        SpikeDetector::new(self.delta, 0.0).map(|_| ())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicaGc {
    pub replica: usize,
    pub isis: usize,
    pub spikes: usize,
    pub simulated_time: f64,
    /// Stopped at `max_time` before collecting `total_isis`.
    pub partial: bool,
    /// KS between halves of this replica's ISIs.
    pub split_half_ks: Option<f64>,
    /// KS between consecutive blocks.
    pub consecutive_block_ks: Vec<f64>,
    /// KS between each block and the pooled CDF of all replicas.
    pub block_vs_pooled_ks: Vec<f64>,
    /// KS between the first `k` blocks and the pooled CDF, `k = 1, 2, ...`.
    pub prefix_vs_pooled_ks: Vec<f64>,
    /// `(t, spikes entered before t)` at doubling checkpoints.
    pub count_checkpoints: Vec<(f64, usize)>,
    pub windows: usize,
    pub spike_free_windows: usize,
    pub occupation_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GcReport {
    pub block: usize,
    pub pooled_isis: usize,
    pub replicas: Vec<ReplicaGc>,
    /// Median over replicas of `prefix_vs_pooled_ks[k]`.
    pub median_prefix_ks: Vec<f64>,
    pub partial: bool,
}

impl GcReport {
    /// Builds the convergence tables from ISI sequences and their trains.
    pub fn from_trains(trains: &[SpikeTrain], block: usize, total_isis: usize, period: f64, checkpoint_base: f64) -> Result<GcReport> {
        let isis: Vec<Vec<f64>> = trains
            .iter()
            .map(|t| {
                let mut v = t.isis();
                v.truncate(total_isis);
                v
            })
            .collect();
        let mut pooled: Vec<f64> = isis.iter().flatten().copied().collect();
        if pooled.is_empty() {
            return Err(Error::InsufficientData("no interspike intervals were recorded".into()));
        }
        pooled.sort_by(f64::total_cmp);
        let sorted = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let mut partial = false;
        let replicas: Vec<ReplicaGc> = trains
            .iter()
            .zip(&isis)
            .enumerate()
            .map(|(r, (train, x))| {
                let blocks: Vec<Vec<f64>> = x.chunks_exact(block).map(sorted).collect();
                let consecutive = blocks.windows(2).map(|w| ks_sorted(&w[0], &w[1])).collect();
                let vs_pooled = blocks.iter().map(|b| ks_sorted(b, &pooled)).collect();
                let prefix = (1..=blocks.len())
                    .map(|k| ks_sorted(&sorted(&x[..k * block]), &pooled))
                    .collect();
                let half = x.len() / 2;
                let split_half = (half > 0)
                    .then(|| ks_sorted(&sorted(&x[..half]), &sorted(&x[half..2 * half])));
                let mut checkpoints = Vec::new();
                let mut t = checkpoint_base;
                while train.t_start + t <= train.t_end {
                    checkpoints.push((t, train.count_before(train.t_start + t)));
                    t *= 2.0;
                }
                let (windows, free) = train.spike_free_windows(period);
                let is_partial = x.len() < total_isis;
                partial |= is_partial;
                ReplicaGc {
                    replica: r,
                    isis: x.len(),
                    spikes: train.len(),
                    simulated_time: train.t_end - train.t_start,
                    partial: is_partial,
                    split_half_ks: split_half,
                    consecutive_block_ks: consecutive,
                    block_vs_pooled_ks: vs_pooled,
                    prefix_vs_pooled_ks: prefix,
                    count_checkpoints: checkpoints,
                    windows,
                    spike_free_windows: free,
                    occupation_fraction: train.occupation_fraction(),
                }
            })
            .collect();
        let depth = replicas.iter().map(|r| r.prefix_vs_pooled_ks.len()).min().unwrap_or(0);
        let median_prefix_ks = (0..depth)
            .map(|k| median(replicas.iter().map(|r| r.prefix_vs_pooled_ks[k]).collect()))
            .collect();
        Ok(GcReport { block, pooled_isis: pooled.len(), replicas, median_prefix_ks, partial })
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Simulates one spike train until `total_isis` intervals or `max_time`.
pub fn simulate_train(spec: &ModelSpec, x0: &[f64], cfg: &GcConfig, replica: usize) -> Result<SpikeTrain> {
    let mut rng = replica_rng(cfg.seed, replica as u64);
    let mut noise = Noise::Rng(&mut rng);
    let mut st = Stepper::new(spec, x0, 0.0, cfg.dt)?;
    let mut det = SpikeDetector::new(cfg.delta, 0.0)?;
    let mut buf = vec![0.0; spec.dim()];
    det.push_state(0.0, x0);
    let max_steps = (cfg.max_time / cfg.dt).ceil() as usize;
    while st.steps_taken() < max_steps && det.completed() < cfg.total_isis + 1 {
        st.step(&mut noise)?;
        st.reported_state(&mut buf);
        det.push_state(st.time(), &buf);
    }
    Ok(det.finish(replica as u64))
}

/// Interspike-interval convergence diagnostics over independent replicas.
pub fn gc_report(spec: &ModelSpec, x0: &[f64], cfg: &GcConfig) -> Result<GcReport> {
    cfg.validate()?;
    let period = spec
        .period()
        .ok_or_else(|| Error::Config("spike-free windows need a periodic input".into()))?;
    let trains = par_replicas(cfg.replicas, |r| simulate_train(spec, x0, cfg, r))?;
    GcReport::from_trains(&trains, cfg.block, cfg.total_isis, period, cfg.checkpoint_base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::PathRecord;
    use std::f64::consts::PI;

    fn synthetic(g: impl Fn(f64) -> f64, dt: f64, horizon: f64) -> PathRecord {
        let n = (horizon / dt).round() as usize;
        let mut states = Vec::new();
        for k in 0..=n {
            let t = k as f64 * dt;
            // m - h = g(t) with h = 0.5
            states.extend_from_slice(&[0.0, 0.5, 0.5 + g(t) / 4.0, 0.5]);
        }
        PathRecord { t0: 0.0, dt, dim: 4, states, noise: vec![0.0; n], seed: 0, events: Default::default() }
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&[0.0, 0.0, 0.9, 0.1]), Region::Spike);
        assert_eq!(classify(&[0.0, 0.0, 0.05, 0.6]), Region::Between);
        assert_eq!(classify(&[0.0, 0.0, 0.3, 0.3]), Region::Boundary);
    }

    #[test]
    fn quiet_path_has_no_spikes() {
        let p = synthetic(|_| -1.0, 0.01, 50.0);
        let train = detect_spikes(&p, 2.0).unwrap();
        assert!(train.is_empty());
        assert_eq!(train.open_tau, None);
    }

    #[test]
    fn sinusoid_crossings() {
        let p = synthetic(|t| (2.0 * PI * t / 20.0).sin(), 0.01, 105.0);
        let train = detect_spikes(&p, 2.0).unwrap();
        let want_tau = [0.0, 20.0, 40.0, 60.0, 80.0];
        let want_sigma = [10.0, 30.0, 50.0, 70.0, 90.0];
        assert_eq!(train.len(), 5);
        for (a, b) in train.taus.iter().zip(want_tau) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
        for (a, b) in train.sigmas.iter().zip(want_sigma) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
        assert!(train.open_tau.is_some_and(|t| (t - 100.0).abs() < 0.01));
        assert_eq!(train.truncated(), 1);
        assert_eq!(train.count_before(101.0), 6);
    }

    #[test]
    fn refractory_period_delays_exit() {
        // Short excursion of 0.5 ms followed by a long quiet stretch.
        let p = synthetic(|t| if (1.0..1.5).contains(&t) { 1.0 } else { -1.0 }, 0.01, 20.0);
        let train = detect_spikes(&p, 2.0).unwrap();
        assert_eq!(train.len(), 1);
        assert!((train.sigmas[0] - (train.taus[0] + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ties_are_not_crossings() {
        let p = synthetic(|_| 0.0, 0.01, 10.0);
        assert!(detect_spikes(&p, 1.0).unwrap().is_empty());
    }

    #[test]
    fn isi_cdf_examples() {
        let train = SpikeTrain {
            taus: vec![1.0, 3.0, 6.0],
            sigmas: vec![1.5, 3.5, 6.5],
            delta: 0.5,
            open_tau: None,
            t_start: 0.0,
            t_end: 7.0,
            source: 0,
        };
        let cdf = isi_cdf(&train).unwrap();
        assert_eq!(cdf.samples(), &[2.0, 3.0]);
        assert_eq!(cdf.eval(2.5), 0.5);
        assert_eq!(cdf.eval(1.9), 0.0);
        assert_eq!(cdf.eval(3.0), 1.0);
        assert_eq!(cdf.eval(train.delta), 0.0);
        let one = SpikeTrain { taus: vec![1.0], sigmas: vec![2.0], ..train };
        assert!(isi_cdf(&one).is_err());
    }

    #[test]
    fn ks_examples() {
        let a = EmpiricalCdf::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(ks_distance(&a, &a), 0.0);
        let p0 = EmpiricalCdf::new(vec![0.0]).unwrap();
        let p1 = EmpiricalCdf::new(vec![1.0]).unwrap();
        assert_eq!(ks_distance(&p0, &p1), 1.0);
        // Jumps at 1, 1.5, 2, 2.5, 3: |1/3 - 0|, |1/3 - 1/2|, |2/3 - 1/2|, |2/3 - 1|, 0.
        let b = EmpiricalCdf::new(vec![1.5, 2.5]).unwrap();
        assert!((ks_distance(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!(EmpiricalCdf::new(vec![]).is_err());
    }

    #[test]
    fn spike_free_windows_and_occupation() {
        let train = SpikeTrain {
            taus: vec![1.0, 25.0],
            sigmas: vec![3.0, 27.0],
            delta: 1.0,
            open_tau: None,
            t_start: 0.0,
            t_end: 40.0,
            source: 0,
        };
        assert_eq!(train.spike_free_windows(10.0), (4, 2));
        assert!((train.occupation_fraction() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn single_block_has_no_distance_table() {
        let train = SpikeTrain {
            taus: (0..=150).map(|i| i as f64 * 3.0).collect(),
            sigmas: (0..=150).map(|i| i as f64 * 3.0 + 1.0).collect(),
            delta: 1.0,
            open_tau: None,
            t_start: 0.0,
            t_end: 451.0,
            source: 0,
        };
        let r = GcReport::from_trains(&[train], 150, 150, 10.0, 50.0).unwrap();
        assert!(r.replicas[0].consecutive_block_ks.is_empty());
        assert_eq!(r.replicas[0].block_vs_pooled_ks.len(), 1);
        assert_eq!(r.replicas[0].count_checkpoints, vec![(50.0, 17), (100.0, 34), (200.0, 67), (400.0, 134)]);
    }
}

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use periodic_harris::control::{ControlParams, IntegrateOptions};
use periodic_harris::model::{HhInput, ModelSpec, Signal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sim: SimSection,
    pub hoermander: HoermanderSection,
    pub control: ControlSection,
    pub lyapunov: LyapunovSection,
    pub isi: IsiSection,
    pub toy: ToySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Toy,
    Hh,
    Cir,
    Ou,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// CIR level.
    pub a: f64,
    /// Toy damping, or the constant input of the deterministic HH system.
    pub c: f64,
    pub signal: SignalConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SignalShape {
    SinSquared,
    Fourier,
    Constant,
}

/// `sin-squared`: `s0 + s1 sin^2(pi t / period)`. `fourier`: `s0 + sum
/// cos[k] cos(2 pi (k+1) t / period) + sin[k] sin(...)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub shape: SignalShape,
    pub period: f64,
    pub s0: f64,
    pub s1: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub replicas: usize,
    /// Worker threads; 0 uses every logical core.
    pub threads: usize,
    /// Start state; empty means the model's target point.
    pub start: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HoermanderSection {
    pub n_max: usize,
    pub grid: usize,
    pub tol: f64,
    pub node_cap: usize,
    pub extra_times: Vec<f64>,
    pub radius: f64,
    pub neighbours: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    /// Random start points drawn when `points` is empty.
    pub starts: usize,
    pub points: Vec<Vec<f64>>,
    pub dt: f64,
    pub record_stride: usize,
    pub epsilon: f64,
    pub k_shift: i32,
    pub hold_tol: f64,
    pub hold_cap: f64,
    pub cap_factor: f64,
    pub ramp_slope: f64,
    pub ramp_order: u32,
    /// Terminal distance counted as reaching the target.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovSection {
    /// 0 means one drift period.
    pub horizon: f64,
    pub replicas: usize,
    pub v_floor: f64,
    /// Empty means the built-in twenty-point design.
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IsiSection {
    pub total_isis: usize,
    pub block: usize,
    pub delta: f64,
    pub max_time: f64,
    pub checkpoint_base: f64,
    pub split_half_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub times: Vec<f64>,
    pub paths: usize,
    pub xi0: f64,
    pub psi0: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::Cir, a: 1.0, c: 1.0, signal: SignalConfig::default() }
    }
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig { shape: SignalShape::SinSquared, period: 10.0, s0: 0.5, s1: 10.0, cos: vec![], sin: vec![] }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { dt: 0.01, horizon: 1000.0, seed: 1, replicas: 16, threads: 0, start: vec![] }
    }
}

impl Default for HoermanderSection {
    fn default() -> Self {
        HoermanderSection {
            n_max: 6,
            grid: periodic_harris::hoermander::DEFAULT_GRID,
            tol: periodic_harris::hoermander::DEFAULT_TOL,
            node_cap: periodic_harris::hoermander::DEFAULT_NODE_CAP,
            extra_times: vec![],
            radius: 1e-3,
            neighbours: 20,
        }
    }
}

impl Default for ControlSection {
    fn default() -> Self {
        let p = ControlParams::default();
        ControlSection {
            starts: 10,
            points: vec![],
            dt: IntegrateOptions::default().dt,
            record_stride: 100,
            epsilon: p.epsilon,
            k_shift: p.k_shift,
            hold_tol: p.hold_tol,
            hold_cap: p.hold_cap,
            cap_factor: p.cap_factor,
            ramp_slope: p.ramp_slope,
            ramp_order: p.ramp_order,
            tolerance: 1e-2,
        }
    }
}

impl Default for LyapunovSection {
    fn default() -> Self {
        LyapunovSection { horizon: 0.0, replicas: 400, v_floor: 1.0, points: vec![] }
    }
}

impl Default for IsiSection {
    fn default() -> Self {
        IsiSection {
            total_isis: 1000,
            block: 250,
            delta: periodic_harris::spikes::DEFAULT_REFRACTORY,
            max_time: 1e6,
            checkpoint_base: 1000.0,
            split_half_bound: 0.1,
        }
    }
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection { times: vec![0.5, 1.0, 2.0], paths: 10_000, xi0: 1.0, psi0: 0.5, dt: 0.005 }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = Value::try_from(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            let file: Value = toml::from_str(&text).with_context(|| format!("cannot parse config file {}", p.display()))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sim.dt", self.sim.dt),
            ("sim.horizon", self.sim.horizon),
            ("hoermander.tol", self.hoermander.tol),
            ("hoermander.radius", self.hoermander.radius),
            ("control.dt", self.control.dt),
            ("control.hold_cap", self.control.hold_cap),
            ("control.cap_factor", self.control.cap_factor),
            ("control.ramp_slope", self.control.ramp_slope),
            ("control.tolerance", self.control.tolerance),
            ("isi.delta", self.isi.delta),
            ("isi.max_time", self.isi.max_time),
            ("isi.checkpoint_base", self.isi.checkpoint_base),
            ("toy.dt", self.toy.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive, got {v}");
            }
        }
        let counts = [
            ("sim.replicas", self.sim.replicas),
            ("hoermander.n_max", self.hoermander.n_max),
            ("hoermander.grid", self.hoermander.grid),
            ("hoermander.node_cap", self.hoermander.node_cap),
            ("lyapunov.replicas", self.lyapunov.replicas),
            ("toy.paths", self.toy.paths),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!("{name} must be positive");
            }
        }
        if self.lyapunov.horizon < 0.0 {
            bail!("lyapunov.horizon must be >= 0");
        }
        if self.toy.times.iter().any(|&t| !(t > 0.0)) {
            bail!("toy.times must all be positive");
        }
        self.model_spec()?;
        Ok(())
    }

    pub fn signal(&self) -> Result<Signal> {
        let s = &self.model.signal;
        let sig = match s.shape {
            SignalShape::SinSquared => Signal::sin_squared(s.s0, s.s1, s.period),
            SignalShape::Fourier => Signal::new(s.period, s.s0, s.cos.clone(), s.sin.clone()),
            SignalShape::Constant => Signal::constant(s.s0, s.period),
        };
        Ok(sig?)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let spec = match m.kind {
            ModelKind::Toy => ModelSpec::toy(m.c)?,
            ModelKind::Hh => ModelSpec::DeterministicHh { input: HhInput::Constant(m.c) },
            ModelKind::Cir => ModelSpec::cir(m.a, self.signal()?)?,
            ModelKind::Ou => ModelSpec::ou(self.signal()?),
        };
        Ok(spec)
    }

    pub fn control_params(&self) -> ControlParams {
        let c = &self.control;
        ControlParams {
            epsilon: c.epsilon,
            k_shift: c.k_shift,
            hold_tol: c.hold_tol,
            hold_cap: c.hold_cap,
            cap_factor: c.cap_factor,
            ramp_slope: c.ramp_slope,
            ramp_order: c.ramp_order,
            ..ControlParams::default()
        }
    }

    /// Start state from `sim.start`, or the model's target point.
    pub fn start(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        let x = if self.sim.start.is_empty() { spec.target()? } else { self.sim.start.clone() };
        spec.check_state(&x)?;
        Ok(x)
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`, where the value is read as a TOML value and falls back to
/// a bare string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = doc;
    for (i, p) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| anyhow!("override key `{key}` descends into a non-table"))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table.entry(p.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    bail!("empty override key in `{spec}`")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_take_precedence() {
        let c = RunConfig::load(None, &["model.kind=ou".into(), "sim.seed=42".into(), "toy.times=[1.0]".into()]).unwrap();
        assert_eq!(c.model.kind, ModelKind::Ou);
        assert_eq!(c.sim.seed, 42);
        assert_eq!(c.toy.times, vec![1.0]);
    }

    #[test]
    fn cir_level_is_checked() {
        let e = RunConfig::load(None, &["model.a=0.5".into()]).unwrap_err();
        assert!(format!("{e:#}").contains("2a > 1"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["sim.dtt=0.1".into()]).is_err());
        assert!(RunConfig::load(None, &["sim.dt".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.sim.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}

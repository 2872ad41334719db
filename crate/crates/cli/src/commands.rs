use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Result};
use periodic_harris::control::{distance, random_start_points, run_suite, ControlConstants, IntegrateOptions};
use periodic_harris::ergodics::{default_test_points, drift_report, mean_stderr};
use periodic_harris::hoermander::{check_model, generate_for_model, neighbourhood_check, time_grid};
use periodic_harris::model::ModelSpec;
use periodic_harris::sde::{par_replicas, replica_rng, simulate_path, toy_closed_form, Noise, SimConfig, Stepper};
use periodic_harris::spikes::{detect_spikes, gc_report, isi_cdf, GcConfig};
use serde_json::{json, Value};

use crate::config::RunConfig;

/// What a command hands back for the JSON envelope and the console.
pub struct Report {
    pub passed: bool,
    pub summary: String,
    pub result: Value,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn simulate(cfg: &RunConfig, spec: &ModelSpec, dir: &Path) -> Result<Report> {
    let x0 = cfg.start(spec)?;
    let path = simulate_path(spec, &x0, 0.0, &SimConfig::new(spec, cfg.sim.dt, cfg.sim.horizon, cfg.sim.seed))?;
    path.write_csv(create(dir, "path.csv")?)?;
    path.write_binary(create(dir, "path.bin")?)?;
    let names = path.column_names();
    let mut coords = Vec::new();
    let mut summary = format!("{} steps of {} from {:?}\n", path.len() - 1, spec.name(), x0);
    for i in 0..path.dim {
        let (lo, hi) = path.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, x)| (lo.min(x[i]), hi.max(x[i])));
        let name = names.get(i + 1).copied().unwrap_or("x");
        writeln!(summary, "  {name:>3}: min {lo:.6}, max {hi:.6}")?;
        coords.push(json!({ "name": name, "min": lo, "max": hi }));
    }
    writeln!(summary, "  truncations {}, clamps {}", path.events.truncations, path.events.clamps)?;
    let mut result = json!({ "steps": path.len() - 1, "start": x0, "coordinates": coords, "events": path.events });
    if path.dim >= 4 {
        let train = detect_spikes(&path, cfg.isi.delta)?;
        train.write_csv(create(dir, "spikes.csv")?)?;
        if train.len() >= 2 {
            isi_cdf(&train)?.write_csv(create(dir, "isi_cdf.csv")?)?;
        }
        writeln!(summary, "  spikes {}", train.len())?;
        result["spikes"] = json!(train.len());
        result["occupation_fraction"] = json!(train.occupation_fraction());
    }
    Ok(Report { passed: true, summary, result })
}

pub fn hoermander(cfg: &RunConfig, spec: &ModelSpec, _dir: &Path) -> Result<Report> {
    let h = &cfg.hoermander;
    let x = cfg.start(spec)?;
    let verdict = check_model(spec, &x, h.n_max, h.grid, &h.extra_times, h.tol, h.node_cap)?;
    let mut summary = String::new();
    for level in &verdict.levels {
        writeln!(
            summary,
            "  N = {}: {} fields, min rank {} of {}, failing at {} of {} times",
            level.n,
            level.members,
            level.min_rank,
            verdict.dim,
            level.failing_times.len(),
            verdict.times.len()
        )?;
    }
    let mut sweep = Vec::new();
    for tol in [h.tol * 100.0, h.tol / 100.0] {
        let v = check_model(spec, &x, h.n_max, h.grid, &h.extra_times, tol, h.node_cap)?;
        sweep.push(json!({ "tol": tol, "minimal_n": v.minimal_n }));
        if v.minimal_n != verdict.minimal_n {
            writeln!(summary, "  tolerance {tol:e} gives minimal N = {:?}: ill-conditioned", v.minimal_n)?;
        }
    }
    let mut result = json!({ "point": x, "verdict": verdict, "tolerance_sweep": sweep });
    match verdict.minimal_n {
        Some(n) => {
            let bs = generate_for_model(spec, n, h.node_cap)?;
            let period = spec.period().unwrap_or(1.0);
            let near = neighbourhood_check(&bs, &x, &time_grid(period, h.grid, &[]), h.radius, h.neighbours, h.tol, cfg.sim.seed)?;
            writeln!(summary, "  neighbourhood (radius {}): full rank at {} of {} evaluations", near.radius, near.full, near.points)?;
            writeln!(summary, "minimal N = {n}")?;
            result["neighbourhood"] = json!(near);
        }
        None => writeln!(summary, "not established up to N = {}", h.n_max)?,
    }
    Ok(Report { passed: verdict.minimal_n.is_some(), summary, result })
}

pub fn control(cfg: &RunConfig, spec: &ModelSpec, dir: &Path) -> Result<Report> {
    let c = &cfg.control;
    let starts = if !c.points.is_empty() {
        c.points.clone()
    } else if !cfg.sim.start.is_empty() {
        vec![cfg.sim.start.clone()]
    } else {
        random_start_points(spec, c.starts, cfg.sim.seed)?
    };
    let opts = IntegrateOptions { dt: c.dt, record_stride: c.record_stride, ..Default::default() };
    let runs = run_suite(spec, &starts, &cfg.control_params(), &opts)?;
    let mut summary = String::new();
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        run.write_csv(create(dir, &format!("control_{i:03}.csv"))?)?;
        writeln!(
            summary,
            "  start {i:>3}: phases end at {:.4e}, energy {:.4e}, terminal distance {:.3e}",
            run.phase_times().last().copied().unwrap_or(0.0),
            run.energy,
            run.terminal_distance
        )?;
        rows.push(json!({
            "start": starts[i],
            "phase_times": run.phase_times(),
            "phases": run.phases,
            "energy": run.energy,
            "terminal": run.terminal,
            "terminal_distance": run.terminal_distance,
            "converged": run.converged,
        }));
    }
    let spread = runs
        .iter()
        .flat_map(|a| runs.iter().map(move |b| distance(&a.terminal, &b.terminal)))
        .fold(0.0, f64::max);
    let reached = runs.iter().filter(|r| r.converged && r.terminal_distance < c.tolerance).count();
    writeln!(summary, "{reached} of {} starts within {} of the target; terminal spread {spread:.3e}", runs.len(), c.tolerance)?;
    let constants = matches!(spec, ModelSpec::Cir { .. }).then(ControlConstants::standard);
    let result = json!({
        "target": runs.first().map(|r| r.target.clone()),
        "constants": constants,
        "runs": rows,
        "terminal_spread": spread,
    });
    Ok(Report { passed: reached == runs.len(), summary, result })
}

pub fn lyapunov(cfg: &RunConfig, spec: &ModelSpec, _dir: &Path) -> Result<Report> {
    let l = &cfg.lyapunov;
    let horizon = if l.horizon > 0.0 { l.horizon } else { spec.period().unwrap_or(1.0) };
    let points = if l.points.is_empty() { default_test_points(spec)? } else { l.points.clone() };
    let report = drift_report(spec, &points, horizon, l.replicas, cfg.sim.dt, cfg.sim.seed, l.v_floor)?;
    let mut summary = String::from("      V(x)    estimate    stderr\n");
    for (i, p) in report.points.iter().enumerate() {
        let flag = if report.fit.violations.contains(&i) { "  violation" } else { "" };
        writeln!(summary, "  {:>10.4} {:>11.4} {:>9.4}{flag}", p.v, p.estimate, p.stderr)?;
    }
    let f = &report.fit;
    writeln!(summary, "lambda = {:.5} +- {:.5}, delta = {:.4}, {} violations", f.lambda, f.lambda_stderr, f.delta, f.violations.len())?;
    let passed = f.lambda + 3.0 * f.lambda_stderr < 1.0 && f.violations.is_empty();
    Ok(Report { passed, summary, result: serde_json::to_value(&report)? })
}

pub fn isi(cfg: &RunConfig, spec: &ModelSpec, _dir: &Path) -> Result<Report> {
    let i = &cfg.isi;
    let gc = GcConfig {
        total_isis: i.total_isis,
        block: i.block,
        delta: i.delta,
        dt: cfg.sim.dt,
        seed: cfg.sim.seed,
        replicas: cfg.sim.replicas,
        max_time: i.max_time,
        checkpoint_base: i.checkpoint_base,
    };
    let report = gc_report(spec, &cfg.start(spec)?, &gc)?;
    let worst = report.replicas.iter().filter_map(|r| r.split_half_ks).fold(0.0, f64::max);
    let free: usize = report.replicas.iter().map(|r| r.spike_free_windows).sum();
    let windows: usize = report.replicas.iter().map(|r| r.windows).sum();
    let mut summary = String::new();
    writeln!(summary, "  pooled ISIs {}, block {}", report.pooled_isis, report.block)?;
    writeln!(summary, "  median prefix-vs-pooled KS {:.4?}", report.median_prefix_ks)?;
    writeln!(summary, "  worst split-half KS {worst:.4}")?;
    writeln!(summary, "  spike-free windows {free} of {windows}")?;
    if report.partial {
        writeln!(summary, "partial: the time cap stopped at least one replica early")?;
    }
    let passed = !report.partial && worst < i.split_half_bound;
    Ok(Report { passed, summary, result: serde_json::to_value(&report)? })
}

pub fn toy_validate(cfg: &RunConfig, spec: &ModelSpec, _dir: &Path) -> Result<Report> {
    let ModelSpec::Toy { c } = *spec else {
        bail!(periodic_harris::Error::Config("toy-validate needs model.kind = \"toy\"".into()));
    };
    let t = &cfg.toy;
    let mut times = t.times.clone();
    times.sort_by(f64::total_cmp);
    let x0 = [t.xi0, t.psi0];
    let finals: Vec<Vec<f64>> = par_replicas(t.paths, |r| {
        let mut rng = replica_rng(cfg.sim.seed, r as u64);
        let mut st = Stepper::new(spec, &x0, 0.0, t.dt)?;
        let mut noise = Noise::Rng(&mut rng);
        times
            .iter()
            .map(|&s| {
                let target = (s / t.dt).round() as usize;
                st.advance(target.saturating_sub(st.steps_taken()), &mut noise)?;
                Ok(st.state()[0])
            })
            .collect()
    })?;
    let mut summary = String::from("       t     MC mean  closed mean   z(mean)   MC var  closed var   z(var)\n");
    let mut rows = Vec::new();
    let mut passed = true;
    for (k, &s) in times.iter().enumerate() {
        let xs: Vec<f64> = finals.iter().map(|f| f[k]).collect();
        let (mean, se) = mean_stderr(&xs);
        let n = xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let (cm, cv) = toy_closed_form(c, t.xi0, s);
        let zm = (mean - cm) / se;
        let zv = (var - cv) / ((m4 - var * var) / n).sqrt();
        passed &= zm.abs() < 3.0 && zv.abs() < 3.0;
        writeln!(summary, "  {s:>6.3} {mean:>11.5} {cm:>12.5} {zm:>9.3} {var:>9.5} {cv:>11.5} {zv:>8.3}")?;
        rows.push(json!({ "t": s, "mc_mean": mean, "closed_mean": cm, "z_mean": zm, "mc_var": var, "closed_var": cv, "z_var": zv }));
    }
    Ok(Report { passed, summary, result: json!({ "start": x0, "paths": t.paths, "rows": rows }) })
}

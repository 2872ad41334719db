//! Bracket families and the full weak Hörmander dimension test.
//!
//! `L_0 = {V1..Vm}` and each further level brackets every member `L` of the
//! previous level with `V0, V1, ..., Vm`, i.e. adds `[L, V0], [L, V1], ...`.
//! All members have time component 0, so only their `d` state components
//! enter the rank computation.

use std::collections::HashSet;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{lie_bracket, Expr, SymVectorField, Tape, TimeComponent};
use crate::model::ModelSpec;

/// Default per-member DAG size cap.
pub const DEFAULT_NODE_CAP: usize = 500_000;
/// Default relative rank tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default number of grid times over one period.
pub const DEFAULT_GRID: usize = 64;

pub struct BracketSet {
    v0: SymVectorField,
    diffusions: Vec<SymVectorField>,
    members: Vec<SymVectorField>,
    levels: Vec<usize>,
    seen: HashSet<Vec<u64>>,
    node_cap: usize,
    tape: OnceLock<Tape>,
}

fn negate(f: &SymVectorField, word: String) -> Result<SymVectorField> {
    let comps = f.components().iter().map(|c| (-c.clone()).simplify()).collect();
    SymVectorField::new(TimeComponent::Zero, comps, word)
}

fn is_zero(f: &SymVectorField) -> bool {
    f.components().iter().all(|c| c.is_const(0.0))
}

fn signature(f: &SymVectorField) -> Vec<u64> {
    f.components().iter().map(Expr::structural_hash).collect()
}

impl BracketSet {
    /// The family at depth 0.
    pub fn new(v0: SymVectorField, diffusions: Vec<SymVectorField>, node_cap: usize) -> Result<BracketSet> {
        if v0.time_component() != TimeComponent::One {
            return Err(Error::InvalidField("drift field must have time component 1".into()));
        }
        if diffusions.is_empty() {
            return Err(Error::InvalidField("need at least one diffusion field".into()));
        }
        for v in &diffusions {
            if v.time_component() != TimeComponent::Zero {
                return Err(Error::InvalidField(format!(
                    "diffusion field `{}` must have time component 0",
                    v.word()
                )));
            }
            if v.dim() != v0.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "`{}` has dimension {} but `{}` has {}",
                    v.word(),
                    v.dim(),
                    v0.word(),
                    v0.dim()
                )));
            }
        }
        let mut bs = BracketSet {
            v0,
            diffusions: diffusions.clone(),
            members: Vec::new(),
            levels: Vec::new(),
            seen: HashSet::new(),
            node_cap,
            tape: OnceLock::new(),
        };
        let mut added = 0;
        for v in diffusions {
            if bs.admit(v.simplify()) {
                added += 1;
            }
        }
        bs.levels.push(added);
        Ok(bs)
    }

    fn admit(&mut self, f: SymVectorField) -> bool {
        if is_zero(&f) || !self.seen.insert(signature(&f)) {
            return false;
        }
        self.members.push(f);
        true
    }

    /// Depth reached so far.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.v0.dim()
    }

    pub fn members(&self) -> &[SymVectorField] {
        &self.members
    }

    /// Number of members added at each level.
    pub fn level_sizes(&self) -> &[usize] {
        &self.levels
    }

    pub fn words(&self) -> Vec<String> {
        self.members.iter().map(|m| m.word().to_string()).collect()
    }

    /// Adds one more level of brackets.
    pub fn extend(&mut self) -> Result<()> {
        let total = self.members.len();
        let start = total - self.levels.last().copied().unwrap_or(0);
        let mut added = 0;
        for i in start..total {
            let l = self.members[i].clone();
            let lw = l.word().to_string();
            // [L, V0] = -[V0, L]; the bracket routine needs time component 0
            // in its second argument.
            let with_v0 = negate(&lie_bracket(&self.v0, &l)?, format!("[{lw},{}]", self.v0.word()))?;
            let mut candidates = vec![with_v0];
            for v in &self.diffusions {
                candidates.push(lie_bracket(&l, v)?);
            }
            for c in candidates {
                let nodes = c.node_count();
                if nodes > self.node_cap {
                    return Err(Error::BlowUp { word: c.word().to_string(), nodes, cap: self.node_cap });
                }
                if self.admit(c) {
                    added += 1;
                }
            }
        }
        self.levels.push(added);
        self.tape = OnceLock::new();
        Ok(())
    }

    fn tape(&self) -> &Tape {
        self.tape.get_or_init(|| {
            let all: Vec<Expr> = self.members.iter().flat_map(|m| m.components().iter().cloned()).collect();
            Tape::compile(&all)
        })
    }

    /// `d x |L_N|` matrix of members evaluated at `(s, x)`.
    pub fn evaluate(&self, s: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!("point has length {}, fields have dimension {d}", x.len())));
        }
        let vals = self.tape().eval(s, x);
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "bracket `{}` is not finite at s = {s}, x = {x:?}",
                self.members[i / d].word()
            )));
        }
        Ok(DMatrix::from_column_slice(d, self.members.len(), &vals))
    }
}

/// Builds `L_N` from `V0` and the diffusion fields.
pub fn generate_ln(v0: &SymVectorField, diffusions: &[SymVectorField], n: usize, node_cap: usize) -> Result<BracketSet> {
    let mut bs = BracketSet::new(v0.clone(), diffusions.to_vec(), node_cap)?;
    for _ in 0..n {
        bs.extend()?;
    }
    Ok(bs)
}

/// `L_N` for a model's own fields.
pub fn generate_for_model(spec: &ModelSpec, n: usize, node_cap: usize) -> Result<BracketSet> {
    let (v0, v1) = spec.symbolic_fields()?;
    generate_ln(&v0, &[v1], n, node_cap)
}

#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub s: f64,
    pub x: Vec<f64>,
    pub n: usize,
    pub members: usize,
    /// Singular values after row and column equilibration.
    pub singular_values: Vec<f64>,
    /// Singular values of the matrix as evaluated.
    pub raw_singular_values: Vec<f64>,
    pub tol: f64,
    pub rank: usize,
    pub raw_rank: usize,
    pub full: bool,
}

/// Alternating row and column normalization. Scaling by invertible
/// diagonal matrices leaves the rank unchanged but removes the unit
/// disparity between coordinates and between bracket depths.
pub fn equilibrate(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = a.clone();
    for _ in 0..30 {
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        for mut col in m.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
    }
    m
}

fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.ncols() == 0 {
        return vec![0.0; a.nrows()];
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    // A d x k matrix with k < d still has d singular values, the rest zero.
    s.resize(a.nrows().max(s.len()), 0.0);
    s
}

fn numerical_rank(sv: &[f64], tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0).max(1e-300);
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Rank of the evaluated family at `(s, x)`.
pub fn span_dimension(bs: &BracketSet, s: f64, x: &[f64], tol: f64) -> Result<RankReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("rank tolerance must be positive, got {tol}")));
    }
    let a = bs.evaluate(s, x)?;
    Ok(rank_report(&a, s, x, bs.depth(), tol))
}

pub fn rank_report(a: &DMatrix<f64>, s: f64, x: &[f64], n: usize, tol: f64) -> RankReport {
    let raw = singular_values(a);
    let eq = singular_values(&equilibrate(a));
    let rank = numerical_rank(&eq, tol);
    RankReport {
        s,
        x: x.to_vec(),
        n,
        members: a.ncols(),
        raw_rank: numerical_rank(&raw, tol),
        singular_values: eq,
        raw_singular_values: raw,
        tol,
        rank,
        full: rank == a.nrows(),
    }
}

/// `iT/G` for `i < G`, plus `extra` reduced modulo `T`, sorted.
pub fn time_grid(period: f64, g: usize, extra: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = (0..g).map(|i| i as f64 * period / g as f64).collect();
    t.extend(extra.iter().map(|s| s.rem_euclid(period)));
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelResult {
    pub n: usize,
    pub members: usize,
    pub words: Vec<String>,
    pub min_rank: usize,
    pub failing_times: Vec<f64>,
    pub reports: Vec<RankReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HoermanderVerdict {
    pub dim: usize,
    pub tol: f64,
    pub times: Vec<f64>,
    /// Smallest `N` with full rank at every grid time.
    pub minimal_n: Option<usize>,
    pub levels: Vec<LevelResult>,
}

impl HoermanderVerdict {
    pub fn established(&self) -> bool {
        self.minimal_n.is_some()
    }
}

/// Tests `N = 1..=n_max` in turn and stops at the first `N` that spans at
/// every time in `times`.
pub fn full_weak_hoermander_check(
    v0: &SymVectorField,
    diffusions: &[SymVectorField],
    x: &[f64],
    n_max: usize,
    times: &[f64],
    tol: f64,
    node_cap: usize,
) -> Result<HoermanderVerdict> {
    let mut bs = BracketSet::new(v0.clone(), diffusions.to_vec(), node_cap)?;
    let d = bs.dim();
    let mut levels = Vec::new();
    let mut minimal_n = None;
    for n in 1..=n_max {
        bs.extend()?;
        let reports: Vec<RankReport> = times
            .par_iter()
            .map(|&s| span_dimension(&bs, s, x, tol))
            .collect::<Result<_>>()?;
        let failing: Vec<f64> = reports.iter().filter(|r| !r.full).map(|r| r.s).collect();
        let min_rank = reports.iter().map(|r| r.rank).min().unwrap_or(0);
        let done = failing.is_empty();
        levels.push(LevelResult {
            n,
            members: bs.members().len(),
            words: bs.words(),
            min_rank,
            failing_times: failing,
            reports,
        });
        if done {
            minimal_n = Some(n);
            break;
        }
    }
    Ok(HoermanderVerdict { dim: d, tol, times: times.to_vec(), minimal_n, levels })
}

/// Runs the check for a model at `x` over `grid` equispaced times plus
/// `extra` times.
pub fn check_model(
    spec: &ModelSpec,
    x: &[f64],
    n_max: usize,
    grid: usize,
    extra: &[f64],
    tol: f64,
    node_cap: usize,
) -> Result<HoermanderVerdict> {
    let period = spec
        .period()
        .ok_or_else(|| Error::Config(format!("{} model has no drift period", spec.name())))?;
    let (v0, v1) = spec.symbolic_fields()?;
    full_weak_hoermander_check(&v0, &[v1], x, n_max, &time_grid(period, grid, extra), tol, node_cap)
}

#[derive(Debug, Clone, Serialize)]
pub struct NeighbourhoodReport {
    pub radius: f64,
    pub points: usize,
    pub full: usize,
    pub min_rank: usize,
}

/// Re-evaluates the rank at `count` random points within `radius` of `x`
/// (sup norm) at every time in `times`.
pub fn neighbourhood_check(
    bs: &BracketSet,
    x: &[f64],
    times: &[f64],
    radius: f64,
    count: usize,
    tol: f64,
    seed: u64,
) -> Result<NeighbourhoodReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..count)
        .map(|_| x.iter().map(|c| c + rng.random_range(-radius..=radius)).collect())
        .collect();
    let ranks: Vec<usize> = points
        .par_iter()
        .flat_map_iter(|p| times.iter().map(move |&s| (p, s)))
        .map(|(p, s)| span_dimension(bs, s, p, tol).map(|r| r.rank))
        .collect::<Result<_>>()?;
    Ok(NeighbourhoodReport {
        radius,
        points: ranks.len(),
        full: ranks.iter().filter(|&&r| r == bs.dim()).count(),
        min_rank: ranks.iter().copied().min().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn toy(c: f64) -> (SymVectorField, SymVectorField) {
        ModelSpec::toy(c).unwrap().symbolic_fields().unwrap()
    }

    #[test]
    fn depth_zero_is_the_diffusion_family() {
        let (v0, v1) = toy(1.0);
        let bs = generate_ln(&v0, &[v1], 0, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(bs.words(), vec!["V1"]);
    }

    #[test]
    fn toy_first_bracket() {
        let (v0, v1) = toy(1.0);
        let bs = generate_ln(&v0, &[v1], 1, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(bs.words(), vec!["V1", "[V1,V0]"]);
        let s = 0.3;
        let m = bs.evaluate(s, &[0.4, 2.0 / 3.0]).unwrap();
        let sin2 = (2.0 * PI * s).sin().powi(2);
        assert!((m[(0, 1)] + sin2).abs() < 1e-14);
        assert!((m[(1, 1)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn toy_level_sizes_at_depth_two() {
        let (v0, v1) = toy(1.0);
        let bs = generate_ln(&v0, &[v1], 2, DEFAULT_NODE_CAP).unwrap();
        // [V1,V1] vanishes; both brackets of [V1,V0] survive.
        assert_eq!(bs.level_sizes(), &[1, 1, 2]);
        let s = 0.2;
        let m = bs.evaluate(s, &[0.0, 2.0 / 3.0]).unwrap();
        let w = 2.0 * PI * s;
        let c = 1.0;
        // [[V1,V0],V0] = (0, 2 pi c sin(4 pi s) + c^2 sin^4, 1.5) up to sign.
        let want = [2.0 * PI * c * (2.0 * w).sin() + c * c * w.sin().powi(4), 1.5];
        let col = bs.words().iter().position(|w| w == "[[V1,V0],V0]").unwrap();
        assert!((m[(0, col)] - want[0]).abs() < 1e-12, "{} vs {}", m[(0, col)], want[0]);
        assert!((m[(1, col)] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn toy_rank_criterion() {
        let (v0, v1) = toy(1.0);
        let bs = generate_ln(&v0, &[v1], 1, DEFAULT_NODE_CAP).unwrap();
        for i in 0..64 {
            let r = span_dimension(&bs, i as f64 / 64.0, &[0.0, 2.0 / 3.0], DEFAULT_TOL).unwrap();
            assert_eq!(r.rank, 2);
        }
        let (v0, v1) = toy(2.0);
        let bs = generate_ln(&v0, &[v1], 1, DEFAULT_NODE_CAP).unwrap();
        let s = (3f64.sqrt() / 2.0).asin() / (2.0 * PI);
        let r = span_dimension(&bs, s, &[0.0, 2.0 / 3.0], DEFAULT_TOL).unwrap();
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn duplicate_columns_do_not_raise_rank() {
        let (v0, v1) = toy(2.0);
        let bs = generate_ln(&v0, &[v1.clone()], 1, DEFAULT_NODE_CAP).unwrap();
        let s = (3f64.sqrt() / 2.0).asin() / (2.0 * PI);
        let x = [0.0, 2.0 / 3.0];
        let a = bs.evaluate(s, &x).unwrap();
        let base = rank_report(&a, s, &x, 1, DEFAULT_TOL);
        let col = a.column(0).clone_owned();
        let b = a.clone().insert_columns(2, 2, 0.0);
        let mut b = b;
        b.set_column(2, &col);
        b.set_column(3, &col);
        let dup = rank_report(&b, s, &x, 1, DEFAULT_TOL);
        assert_eq!(base.rank, dup.rank);
        assert_eq!(base.raw_rank, dup.raw_rank);
    }

    #[test]
    fn minimal_n_for_the_toy_model() {
        let spec = ModelSpec::toy(1.0).unwrap();
        let v = check_model(&spec, &[0.0, 2.0 / 3.0], 3, 64, &[], DEFAULT_TOL, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(v.minimal_n, Some(1));
        assert_eq!(v.times.len(), 64);
    }

    #[test]
    fn blow_up_guard_names_the_word() {
        let spec = ModelSpec::cir(1.0, crate::model::default_signal()).unwrap();
        match generate_for_model(&spec, 2, 50) {
            Err(Error::BlowUp { word, cap, .. }) => {
                assert_eq!(cap, 50);
                assert!(word.starts_with("[V1,"));
            }
            other => panic!("{:?}", other.map(|b| b.words())),
        }
    }

    #[test]
    fn equilibration_preserves_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[1e-9, 2e-9, 0.0, 1e3, 2e3, 0.0, 0.0, 0.0, 5.0]);
        let r = rank_report(&a, 0.0, &[0.0; 3], 0, 1e-8);
        assert_eq!(r.rank, 2);
    }

    #[test]
    fn domain_errors_are_reported() {
        let spec = ModelSpec::cir(1.0, crate::model::default_signal()).unwrap();
        let bs = generate_for_model(&spec, 1, DEFAULT_NODE_CAP).unwrap();
        assert!(matches!(bs.evaluate(0.0, &[0.0, 0.3, 0.1, 0.6, -1.0]), Err(Error::Domain(_))));
    }
}

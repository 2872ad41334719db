use std::fmt;
use std::sync::OnceLock;

use super::diff::{add, mul, sub};
use super::{parse, Expr, Tape, Var};
use crate::error::{Error, Result};

/// Time component of an augmented field on (t, x1..xd).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeComponent {
    Zero,
    One,
}

/// A vector field on time × state with components `(V^0, V^1, ..., V^d)`.
#[derive(Clone)]
pub struct SymVectorField {
    dim: usize,
    time: TimeComponent,
    components: Vec<Expr>,
    word: String,
    tape: OnceLock<Tape>,
}

impl fmt::Debug for SymVectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymVectorField")
            .field("word", &self.word)
            .field("time", &self.time)
            .field("components", &self.components)
            .finish()
    }
}

impl fmt::Display for SymVectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.word)?;
        writeln!(f, "{}", if self.time == TimeComponent::One { 1 } else { 0 })?;
        for c in &self.components {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

impl SymVectorField {
    /// `state` holds the d state components; the time component is given
    /// separately because it must be identically 0 or 1.
    pub fn new(time: TimeComponent, state: Vec<Expr>, word: impl Into<String>) -> Result<Self> {
        let dim = state.len();
        if dim == 0 {
            return Err(Error::InvalidField("a field needs at least one state component".into()));
        }
        if dim > 9 {
            return Err(Error::InvalidField("at most 9 state variables are supported".into()));
        }
        for (i, c) in state.iter().enumerate() {
            let m = c.max_state_index() as usize;
            if m > dim {
                return Err(Error::InvalidField(format!(
                    "component {} refers to x{m} but the field has dimension {dim}",
                    i + 1
                )));
            }
        }
        Ok(SymVectorField { dim, time, components: state, word: word.into(), tape: OnceLock::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_component(&self) -> TimeComponent {
        self.time
    }

    /// State components `V^1..V^d`.
    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn word(&self) -> &str {
        &self.word
    }

    pub fn with_word(mut self, word: impl Into<String>) -> Self {
        self.word = word.into();
        self
    }

    /// Total DAG size over all components.
    pub fn node_count(&self) -> usize {
        self.components.iter().map(Expr::node_count).sum()
    }

    pub fn tape(&self) -> &Tape {
        self.tape.get_or_init(|| Tape::compile(&self.components))
    }

    /// State components evaluated at `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.tape().eval(t, x)
    }

    pub fn eval_into(&self, t: f64, x: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        self.tape().eval_into(t, x, scratch, out)
    }

    pub fn simplify(&self) -> Self {
        SymVectorField {
            dim: self.dim,
            time: self.time,
            components: self.components.iter().map(Expr::simplify).collect(),
            word: self.word.clone(),
            tape: OnceLock::new(),
        }
    }
}

/// `[A, B]^i = sum_j (A^j dB^i/dy^j - B^j dA^i/dy^j)` with `y^0 = t`.
///
/// `B` must have time component 0, so the result does too; the `d/dt` term
/// appears exactly when `A` has time component 1.
pub fn lie_bracket(a: &SymVectorField, b: &SymVectorField) -> Result<SymVectorField> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "cannot bracket fields of dimension {} and {}",
            a.dim, b.dim
        )));
    }
    if b.time != TimeComponent::Zero {
        return Err(Error::InvalidField(format!(
            "second argument `{}` must have time component 0",
            b.word
        )));
    }
    let d = a.dim;
    let vars: Vec<Var> = (1..=d as u8).map(Var::X).collect();
    let comps = (0..d)
        .map(|i| {
            let mut acc = if a.time == TimeComponent::One {
                b.components[i].diff(Var::T)
            } else {
                Expr::zero()
            };
            for (j, &v) in vars.iter().enumerate() {
                let t1 = mul(a.components[j].clone(), b.components[i].diff(v));
                let t2 = mul(b.components[j].clone(), a.components[i].diff(v));
                acc = add(acc, sub(t1, t2));
            }
            acc.simplify()
        })
        .collect();
    SymVectorField::new(TimeComponent::Zero, comps, format!("[{},{}]", a.word, b.word))
}

/// Reads fields from a definition file.
///
/// Each field starts with a `[name]` header followed by one component per
/// line: the time component (`0` or `1`) and then `x1..xd` components. `#`
/// starts a comment. A file without headers holds a single field named `V`.
pub fn parse_field_file(text: &str) -> Result<Vec<SymVectorField>> {
    let mut sections: Vec<(String, Vec<(usize, String)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        if sections.is_empty() {
            sections.push(("V".to_string(), Vec::new()));
        }
        sections.last_mut().unwrap().1.push((lineno + 1, line.to_string()));
    }
    if sections.is_empty() {
        return Err(Error::InvalidField("definition file holds no fields".into()));
    }
    let fields: Vec<SymVectorField> = sections
        .into_iter()
        .map(|(name, lines)| {
            let mut exprs = Vec::with_capacity(lines.len());
            for (lineno, l) in &lines {
                let e = parse(l).map_err(|e| {
                    Error::InvalidField(format!("field `{name}`, line {lineno}: {e}"))
                })?;
                exprs.push(e);
            }
            if exprs.len() < 2 {
                return Err(Error::InvalidField(format!(
                    "field `{name}` needs a time component and at least one state component"
                )));
            }
            let time = match exprs[0].simplify().as_const() {
                Some(c) if c == 0.0 => TimeComponent::Zero,
                Some(c) if c == 1.0 => TimeComponent::One,
                _ => {
                    return Err(Error::InvalidField(format!(
                        "field `{name}`: time component must be 0 or 1"
                    )))
                }
            };
            SymVectorField::new(time, exprs.split_off(1), name)
        })
        .collect::<Result<_>>()?;
    let d = fields[0].dim;
    if let Some(f) = fields.iter().find(|f| f.dim != d) {
        return Err(Error::DimensionMismatch(format!(
            "field `{}` has dimension {} but `{}` has {d}",
            f.word, f.dim, fields[0].word
        )));
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(c: f64) -> (SymVectorField, SymVectorField) {
        let v0 = SymVectorField::new(
            TimeComponent::One,
            vec![
                parse(&format!("-{c}*sin(2*pi*t)^2*x1")).unwrap(),
                parse("1 - 1.5*x2").unwrap(),
            ],
            "V0",
        )
        .unwrap();
        let v1 = SymVectorField::new(
            TimeComponent::Zero,
            vec![Expr::one(), Expr::x(2)],
            "V1",
        )
        .unwrap();
        (v0, v1)
    }

    #[test]
    fn toy_bracket() {
        let (v0, v1) = toy(1.3);
        let b = lie_bracket(&v0, &v1).unwrap();
        assert_eq!(b.word(), "[V0,V1]");
        for &(t, x1, x2) in &[(0.1, 0.5, -2.0), (0.37, -3.0, 0.4)] {
            let s = (2.0 * std::f64::consts::PI * t).sin();
            let v = b.eval(t, &[x1, x2]);
            assert!((v[0] - 1.3 * s * s).abs() < 1e-14);
            assert!((v[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn self_bracket_vanishes() {
        let (_, v1) = toy(1.0);
        let b = lie_bracket(&v1, &v1).unwrap();
        assert!(b.components().iter().all(|c| c.is_const(0.0)));
    }

    #[test]
    fn constant_fields_commute() {
        let a = SymVectorField::new(TimeComponent::Zero, vec![Expr::one(), Expr::zero()], "A").unwrap();
        let b = SymVectorField::new(TimeComponent::Zero, vec![Expr::zero(), Expr::one()], "B").unwrap();
        let c = lie_bracket(&a, &b).unwrap();
        assert_eq!(c.eval(0.3, &[1.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_invalid_arguments() {
        let (v0, v1) = toy(1.0);
        assert!(matches!(lie_bracket(&v1, &v0), Err(Error::InvalidField(_))));
        let w = SymVectorField::new(TimeComponent::Zero, vec![Expr::one()], "W").unwrap();
        assert!(matches!(lie_bracket(&v1, &w), Err(Error::DimensionMismatch(_))));
        assert!(SymVectorField::new(TimeComponent::Zero, vec![Expr::x(3)], "U").is_err());
    }

    #[test]
    fn definition_file_round_trip() {
        let (v0, v1) = toy(1.0);
        let text = format!("# toy model\n{v0}\n{v1}");
        let fields = parse_field_file(&text).unwrap();
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].word(), "V0");
        assert_eq!(fields[0].time_component(), TimeComponent::One);
        assert_eq!(fields[1].eval(0.0, &[0.0, 3.0]), vec![1.0, 3.0]);
        assert_eq!(fields[0].eval(0.2, &[0.5, 0.5]), v0.eval(0.2, &[0.5, 0.5]));
    }

    #[test]
    fn definition_file_errors() {
        assert!(parse_field_file("# nothing\n").is_err());
        assert!(parse_field_file("[A]\n2\nx1\n").is_err());
        assert!(parse_field_file("[A]\n0\nx1\n[B]\n0\nx1\nx2\n").is_err());
        assert!(parse_field_file("[A]\n0\nx1 +\n").is_err());
    }
}

//! A small symbolic expression engine.
//!
//! Expressions are immutable trees over one time variable `t` and state
//! variables `x1..x9`. Children are reference counted, so differentiation and
//! bracket computations share subtrees instead of copying them; the resulting
//! DAGs are evaluated efficiently through [`Tape`].
//!
//! # Grammar
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' exponent)?
//! exponent:= ['-'] integer | '(' ['-'] integer ')'
//! primary := number | 'pi' | 't' | 'x' digit
//!          | func '(' expr ')' | '(' expr ')'
//! func    := 'exp' | 'log' | 'sin' | 'cos' | 'sqrt' | 'phi' | 'dphi' integer
//! number  := digits ['.' digits] [('e' | 'E') ['+' | '-'] digits]
//! ```
//!
//! A minus sign written directly in front of a numeric literal folds into a
//! negative constant unless the literal is raised to a power. `phi(u) = u / (exp(u) - 1)` with `phi(0) = 1`;
//! `dphiK` is its K-th derivative.

mod diff;
mod field;
mod parse;
mod simplify;
mod tape;

use std::collections::HashMap;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops;
use std::sync::Arc;

pub use field::{lie_bracket, parse_field_file, SymVectorField, TimeComponent};
pub use parse::parse;
pub use tape::Tape;

/// A variable: the time `t` or a 1-based state coordinate `x1..x9`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    X(u8),
}

impl Var {
    /// State coordinate `x{i}` (1-based).
    pub fn x(i: u8) -> Var {
        assert!((1..=9).contains(&i), "state variables are x1..x9");
        Var::X(i)
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => f.write_str("t"),
            Var::X(i) => write!(f, "x{i}"),
        }
    }
}

/// Unary analytic functions. `Phi(k)` is the k-th derivative of the kernel
/// `u / (exp(u) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Phi(u8),
}

impl Func {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Func::Exp => u.exp(),
            Func::Log => u.ln(),
            Func::Sin => u.sin(),
            Func::Cos => u.cos(),
            Func::Sqrt => u.sqrt(),
            Func::Phi(0) => phi(u),
            Func::Phi(k) => phi_derivative(k as usize, u),
        }
    }

    fn name(self) -> String {
        match self {
            Func::Exp => "exp".into(),
            Func::Log => "log".into(),
            Func::Sin => "sin".into(),
            Func::Cos => "cos".into(),
            Func::Sqrt => "sqrt".into(),
            Func::Phi(0) => "phi".into(),
            Func::Phi(k) => format!("dphi{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, i32),
    Call(Func, Expr),
}

/// Shared handle to an immutable expression node.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || *self.0 == *other.0
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    pub fn new(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn constant(c: f64) -> Expr {
        Expr::new(Node::Const(c))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn var(v: Var) -> Expr {
        Expr::new(Node::Var(v))
    }

    pub fn t() -> Expr {
        Expr::var(Var::T)
    }

    pub fn x(i: u8) -> Expr {
        Expr::var(Var::x(i))
    }

    pub fn powi(&self, k: i32) -> Expr {
        Expr::new(Node::Pow(self.clone(), k))
    }

    pub fn call(f: Func, arg: Expr) -> Expr {
        Expr::new(Node::Call(f, arg))
    }

    pub fn exp(&self) -> Expr {
        Expr::call(Func::Exp, self.clone())
    }

    pub fn ln(&self) -> Expr {
        Expr::call(Func::Log, self.clone())
    }

    pub fn sin(&self) -> Expr {
        Expr::call(Func::Sin, self.clone())
    }

    pub fn cos(&self) -> Expr {
        Expr::call(Func::Cos, self.clone())
    }

    pub fn sqrt(&self) -> Expr {
        Expr::call(Func::Sqrt, self.clone())
    }

    pub fn phi(&self) -> Expr {
        Expr::call(Func::Phi(0), self.clone())
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_const(&self, c: f64) -> bool {
        self.as_const() == Some(c)
    }

    /// Tree-walking evaluation. `x[0]` is the value of `x1`.
    ///
    /// Shared subexpressions are evaluated once per occurrence; compile a
    /// [`Tape`] for large derivative DAGs.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match &*self.0 {
            Node::Const(c) => *c,
            Node::Var(Var::T) => t,
            Node::Var(Var::X(i)) => x.get(*i as usize - 1).copied().unwrap_or(f64::NAN),
            Node::Neg(a) => -a.eval(t, x),
            Node::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Node::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Node::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Node::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Node::Pow(a, k) => a.eval(t, x).powi(*k),
            Node::Call(f, a) => f.apply(a.eval(t, x)),
        }
    }

    /// Number of distinct nodes in the DAG.
    pub fn node_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.ptr()) {
                continue;
            }
            match e.node() {
                Node::Const(_) | Node::Var(_) => {}
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => stack.push(a.clone()),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    stack.push(a.clone());
                    stack.push(b.clone());
                }
            }
        }
        seen.len()
    }

    /// Largest state index referenced, 0 if none.
    pub fn max_state_index(&self) -> u8 {
        let mut memo = HashMap::new();
        max_index(self, &mut memo)
    }

    /// Structural hash; equal trees hash equally regardless of sharing.
    pub fn structural_hash(&self) -> u64 {
        let mut memo = HashMap::new();
        shash(self, &mut memo)
    }

    pub fn diff(&self, var: Var) -> Expr {
        diff::diff(self, var)
    }

    pub fn simplify(&self) -> Expr {
        simplify::simplify(self)
    }
}

fn max_index(e: &Expr, memo: &mut HashMap<usize, u8>) -> u8 {
    if let Some(&m) = memo.get(&e.ptr()) {
        return m;
    }
    let m = match e.node() {
        Node::Const(_) | Node::Var(Var::T) => 0,
        Node::Var(Var::X(i)) => *i,
        Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => max_index(a, memo),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            max_index(a, memo).max(max_index(b, memo))
        }
    };
    memo.insert(e.ptr(), m);
    m
}

pub(crate) fn shash(e: &Expr, memo: &mut HashMap<usize, u64>) -> u64 {
    if let Some(&h) = memo.get(&e.ptr()) {
        return h;
    }
    let mut s = DefaultHasher::new();
    match e.node() {
        Node::Const(c) => (0u8, c.to_bits()).hash(&mut s),
        Node::Var(v) => (1u8, v).hash(&mut s),
        Node::Neg(a) => (2u8, shash(a, memo)).hash(&mut s),
        Node::Add(a, b) => (3u8, shash(a, memo), shash(b, memo)).hash(&mut s),
        Node::Sub(a, b) => (4u8, shash(a, memo), shash(b, memo)).hash(&mut s),
        Node::Mul(a, b) => (5u8, shash(a, memo), shash(b, memo)).hash(&mut s),
        Node::Div(a, b) => (6u8, shash(a, memo), shash(b, memo)).hash(&mut s),
        Node::Pow(a, k) => (7u8, shash(a, memo), k).hash(&mut s),
        Node::Call(f, a) => (8u8, f, shash(a, memo)).hash(&mut s),
    }
    let h = s.finish();
    memo.insert(e.ptr(), h);
    h
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::constant(c)
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident, $variant:ident) => {
        impl ops::$tr<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::new(Node::$variant(self, rhs))
            }
        }
        impl ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::new(Node::$variant(self.clone(), rhs.clone()))
            }
        }
        impl ops::$tr<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::new(Node::$variant(self, Expr::constant(rhs)))
            }
        }
        impl ops::$tr<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::new(Node::$variant(Expr::constant(self), rhs))
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::new(Node::Neg(self))
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::new(Node::Neg(self.clone()))
    }
}

// Printing precedence levels: sums 1, products 2, unary minus 3, powers 4,
// atoms 5.
fn precedence(e: &Expr) -> u8 {
    match e.node() {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(_) => 3,
        Node::Const(c) if c.is_sign_negative() => 3,
        Node::Pow(..) => 4,
        _ => 5,
    }
}

fn write_prec(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if precedence(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Neg(a) => {
                // `-<number>` would re-parse as a negative literal.
                if a.as_const().is_some() {
                    write!(f, "-({a})")
                } else {
                    f.write_str("-")?;
                    write_prec(a, 3, f)
                }
            }
            Node::Add(a, b) | Node::Sub(a, b) => {
                write_prec(a, 1, f)?;
                f.write_str(if matches!(self.node(), Node::Add(..)) { " + " } else { " - " })?;
                write_prec(b, 2, f)
            }
            Node::Mul(a, b) | Node::Div(a, b) => {
                write_prec(a, 2, f)?;
                f.write_str(if matches!(self.node(), Node::Mul(..)) { "*" } else { "/" })?;
                write_prec(b, 3, f)
            }
            Node::Pow(a, k) => {
                write_prec(a, 5, f)?;
                if *k < 0 {
                    write!(f, "^({k})")
                } else {
                    write!(f, "^{k}")
                }
            }
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Below this magnitude `phi` switches to its Taylor series.
pub const PHI_SERIES_RADIUS: f64 = 1e-4;

/// `u / (exp(u) - 1)`, extended analytically by `phi(0) = 1`.
pub fn phi(u: f64) -> f64 {
    if u.abs() < PHI_SERIES_RADIUS {
        let u2 = u * u;
        1.0 - 0.5 * u + u2 / 12.0 - u2 * u2 / 720.0
    } else {
        u / u.exp_m1()
    }
}

const BERNOULLI_TERMS: usize = 90;

/// `B_n / n!`, the Taylor coefficients of `phi` at 0.
fn phi_taylor() -> &'static [f64; BERNOULLI_TERMS] {
    static COEFFS: std::sync::OnceLock<[f64; BERNOULLI_TERMS]> = std::sync::OnceLock::new();
    COEFFS.get_or_init(|| {
        // phi(u) * (e^u - 1) = u gives sum_{j<n} b_j / (n - j)! = 0 for n >= 2.
        let mut inv_fact = [0.0; BERNOULLI_TERMS + 2];
        inv_fact[0] = 1.0;
        for i in 1..inv_fact.len() {
            inv_fact[i] = inv_fact[i - 1] / i as f64;
        }
        let mut b = [0.0; BERNOULLI_TERMS];
        b[0] = 1.0;
        for n in 2..=BERNOULLI_TERMS {
            let s: f64 = (0..n - 1).map(|j| b[j] * inv_fact[n - j]).sum();
            b[n - 1] = -s;
        }
        b
    })
}

/// k-th derivative of [`phi`].
///
/// Uses the Bernoulli series for |u| < 2 and the Leibniz recursion obtained
/// from `phi(u) (e^u - 1) = u` elsewhere.
pub fn phi_derivative(k: usize, u: f64) -> f64 {
    if k == 0 {
        return phi(u);
    }
    if u.abs() < 2.0 {
        let b = phi_taylor();
        let mut sum = 0.0;
        let mut upow = 1.0;
        for n in k..BERNOULLI_TERMS {
            let falling: f64 = ((n - k + 1)..=n).map(|i| i as f64).product();
            sum += b[n] * falling * upow;
            upow *= u;
        }
        return sum;
    }
    let mut d = Vec::with_capacity(k + 1);
    d.push(phi(u));
    for order in 1..=k {
        let mut binom = 1.0;
        let mut acc = 0.0;
        for (j, dj) in d.iter().enumerate() {
            acc += binom * dj;
            binom = binom * (order - j) as f64 / (j + 1) as f64;
        }
        let delta = if order == 1 { 1.0 } else { 0.0 };
        let value = if u > 0.0 {
            let em = (-u).exp();
            (delta * em - acc) / (-(-u).exp_m1())
        } else {
            (delta - u.exp() * acc) / u.exp_m1()
        };
        d.push(value);
    }
    d[k]
}

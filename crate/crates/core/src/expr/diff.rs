use std::collections::HashMap;

use super::{Expr, Func, Node, Var};

/// Exact symbolic derivative. Results are lightly simplified on the fly so
/// that zero branches do not accumulate.
pub(crate) fn diff(e: &Expr, var: Var) -> Expr {
    let mut memo = HashMap::new();
    d(e, var, &mut memo)
}

fn d(e: &Expr, var: Var, memo: &mut HashMap<usize, Expr>) -> Expr {
    if let Some(r) = memo.get(&e.ptr()) {
        return r.clone();
    }
    let r = match e.node() {
        Node::Const(_) => Expr::zero(),
        Node::Var(v) => Expr::constant(if *v == var { 1.0 } else { 0.0 }),
        Node::Neg(a) => neg(d(a, var, memo)),
        Node::Add(a, b) => add(d(a, var, memo), d(b, var, memo)),
        Node::Sub(a, b) => sub(d(a, var, memo), d(b, var, memo)),
        Node::Mul(a, b) => {
            let da = d(a, var, memo);
            let db = d(b, var, memo);
            add(mul(da, b.clone()), mul(a.clone(), db))
        }
        Node::Div(a, b) => {
            let da = d(a, var, memo);
            let db = d(b, var, memo);
            if db.is_const(0.0) {
                div(da, b.clone())
            } else {
                // (a/b)' = a'/b - (a/b) b'/b
                sub(div(da, b.clone()), div(mul(e.clone(), db), b.clone()))
            }
        }
        Node::Pow(a, k) => {
            let da = d(a, var, memo);
            match *k {
                0 => Expr::zero(),
                1 => da,
                k => mul(mul(Expr::constant(k as f64), a.powi(k - 1)), da),
            }
        }
        Node::Call(f, a) => {
            let da = d(a, var, memo);
            if da.is_const(0.0) {
                Expr::zero()
            } else {
                let outer = match f {
                    Func::Exp => e.clone(),
                    Func::Log => div(Expr::one(), a.clone()),
                    Func::Sin => a.cos(),
                    Func::Cos => neg(a.sin()),
                    Func::Sqrt => div(Expr::constant(0.5), e.clone()),
                    Func::Phi(k) => Expr::call(Func::Phi(k + 1), a.clone()),
                };
                mul(outer, da)
            }
        }
    };
    memo.insert(e.ptr(), r.clone());
    r
}

pub(super) fn neg(a: Expr) -> Expr {
    match a.node() {
        Node::Const(c) => Expr::constant(-c),
        Node::Neg(inner) => inner.clone(),
        _ => -a,
    }
}

pub(super) fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x + y),
        (Some(x), _) if x == 0.0 => b,
        (_, Some(y)) if y == 0.0 => a,
        _ => a + b,
    }
}

pub(super) fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x - y),
        (Some(x), _) if x == 0.0 => neg(b),
        (_, Some(y)) if y == 0.0 => a,
        _ => a - b,
    }
}

pub(super) fn mul(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x * y),
        (Some(x), _) if x == 0.0 => Expr::zero(),
        (_, Some(y)) if y == 0.0 => Expr::zero(),
        (Some(x), _) if x == 1.0 => b,
        (_, Some(y)) if y == 1.0 => a,
        (Some(x), _) if x == -1.0 => neg(b),
        (_, Some(y)) if y == -1.0 => neg(a),
        _ => a * b,
    }
}

pub(super) fn div(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) if y != 0.0 => Expr::constant(x / y),
        (Some(x), _) if x == 0.0 => Expr::zero(),
        (_, Some(y)) if y == 1.0 => a,
        _ => a / b,
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomial() {
        let e = parse("x1^2").unwrap().diff(Var::X(1));
        assert_eq!(e.eval(0.0, &[3.0]), 6.0);
    }

    #[test]
    fn trigonometric_power_in_time() {
        let e = parse("sin(2*pi*t)^2").unwrap().diff(Var::T);
        assert!((e.eval(0.125, &[]) - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn independent_variable() {
        let e = parse("exp(-x2)").unwrap().diff(Var::X(1));
        assert!(e.is_const(0.0));
    }

    #[test]
    fn phi_chain_rule_is_finite_at_removable_singularity() {
        let e = parse("phi((10-x1)/10)").unwrap().diff(Var::X(1));
        assert!((e.eval(0.0, &[10.0]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn quotient_and_sqrt() {
        let e = parse("sqrt(x1)/x2").unwrap();
        let dx1 = e.diff(Var::X(1)).eval(0.0, &[4.0, 2.0]);
        let dx2 = e.diff(Var::X(2)).eval(0.0, &[4.0, 2.0]);
        assert!((dx1 - 0.125).abs() < 1e-15);
        assert!((dx2 + 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_and_negative_power() {
        let e = parse("log(x1) + x1^(-2)").unwrap().diff(Var::X(1));
        assert!((e.eval(0.0, &[2.0]) - (0.5 - 0.25)).abs() < 1e-15);
    }
}

use std::collections::HashMap;

use super::diff::{add, div, mul, neg, sub};
use super::{shash, Expr, Node};

/// Bottom-up rewrite: constant folding, neutral and absorbing elements,
/// double negation. Shared subtrees are rewritten once.
pub(crate) fn simplify(e: &Expr) -> Expr {
    let mut memo = Memo::default();
    s(e, &mut memo)
}

#[derive(Default)]
struct Memo {
    done: HashMap<usize, Expr>,
    hashes: HashMap<usize, u64>,
}

impl Memo {
    fn get(&self, k: &usize) -> Option<&Expr> {
        self.done.get(k)
    }

    fn insert(&mut self, k: usize, v: Expr) {
        self.done.insert(k, v);
    }

    // 64-bit structural hashes stand in for deep comparison, which can be
    // exponential on unshared trees.
    fn same(&mut self, a: &Expr, b: &Expr) -> bool {
        a.ptr() == b.ptr() || shash(a, &mut self.hashes) == shash(b, &mut self.hashes)
    }
}

fn s(e: &Expr, memo: &mut Memo) -> Expr {
    if let Some(r) = memo.get(&e.ptr()) {
        return r.clone();
    }
    let r = match e.node() {
        Node::Const(_) | Node::Var(_) => e.clone(),
        Node::Neg(a) => neg(s(a, memo)),
        Node::Add(a, b) => {
            let (a, b) = (s(a, memo), s(b, memo));
            // x + (-y) -> x - y
            match b.node() {
                Node::Neg(inner) => sub(a, inner.clone()),
                _ => add(a, b),
            }
        }
        Node::Sub(a, b) => {
            let (a, b) = (s(a, memo), s(b, memo));
            match b.node() {
                Node::Neg(inner) => add(a, inner.clone()),
                _ if memo.same(&a, &b) => Expr::zero(),
                _ => sub(a, b),
            }
        }
        Node::Mul(a, b) => {
            let (a, b) = (s(a, memo), s(b, memo));
            // Fold nested constant factors: c1*(c2*x) -> (c1*c2)*x.
            match (a.as_const(), b.node()) {
                (Some(c1), Node::Mul(l, r)) if l.as_const().is_some() => {
                    mul(Expr::constant(c1 * l.as_const().unwrap()), r.clone())
                }
                _ => mul(a, b),
            }
        }
        Node::Div(a, b) => div(s(a, memo), s(b, memo)),
        Node::Pow(a, k) => {
            let a = s(a, memo);
            match (*k, a.as_const()) {
                (0, _) => Expr::one(),
                (1, _) => a,
                (k, Some(c)) => Expr::constant(c.powi(k)),
                (k, None) => match a.node() {
                    Node::Pow(inner, j) => inner.powi(j * k),
                    _ => a.powi(k),
                },
            }
        }
        Node::Call(f, a) => {
            let a = s(a, memo);
            match a.as_const() {
                Some(c) => Expr::constant(f.apply(c)),
                None => Expr::call(*f, a),
            }
        }
    };
    memo.insert(e.ptr(), r.clone());
    r
}

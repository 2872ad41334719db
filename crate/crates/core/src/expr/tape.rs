use std::collections::HashMap;

use super::{Expr, Func, Node, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    T,
    X(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, i32),
    Call(Func, usize),
}

/// A straight-line program evaluating several expressions at once.
///
/// Structurally identical subexpressions are computed once, which matters for
/// iterated brackets whose trees are heavily shared.
#[derive(Debug, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Const(u64),
    T,
    X(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, i32),
    Call(Func, usize),
}

struct Builder {
    ops: Vec<Op>,
    by_key: HashMap<Key, usize>,
    by_ptr: HashMap<usize, usize>,
}

impl Builder {
    fn push(&mut self, key: Key, op: Op) -> usize {
        if let Some(&i) = self.by_key.get(&key) {
            return i;
        }
        self.ops.push(op);
        let i = self.ops.len() - 1;
        self.by_key.insert(key, i);
        i
    }

    fn visit(&mut self, root: &Expr) -> usize {
        // Explicit post-order traversal; derivative DAGs can be deep.
        let mut stack = vec![(root.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if self.by_ptr.contains_key(&e.ptr()) {
                continue;
            }
            let children: Vec<&Expr> = match e.node() {
                Node::Const(_) | Node::Var(_) => vec![],
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => vec![a],
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => vec![a, b],
            };
            if !expanded {
                stack.push((e.clone(), true));
                for c in children {
                    if !self.by_ptr.contains_key(&c.ptr()) {
                        stack.push((c.clone(), false));
                    }
                }
                continue;
            }
            let ix = |b: &Self, c: &Expr| b.by_ptr[&c.ptr()];
            let i = match e.node() {
                Node::Const(c) => self.push(Key::Const(c.to_bits()), Op::Const(*c)),
                Node::Var(Var::T) => self.push(Key::T, Op::T),
                Node::Var(Var::X(k)) => {
                    let k = *k as usize - 1;
                    self.push(Key::X(k), Op::X(k))
                }
                Node::Neg(a) => {
                    let a = ix(self, a);
                    self.push(Key::Neg(a), Op::Neg(a))
                }
                Node::Add(a, b) => {
                    let (a, b) = (ix(self, a), ix(self, b));
                    self.push(Key::Add(a, b), Op::Add(a, b))
                }
                Node::Sub(a, b) => {
                    let (a, b) = (ix(self, a), ix(self, b));
                    self.push(Key::Sub(a, b), Op::Sub(a, b))
                }
                Node::Mul(a, b) => {
                    let (a, b) = (ix(self, a), ix(self, b));
                    self.push(Key::Mul(a, b), Op::Mul(a, b))
                }
                Node::Div(a, b) => {
                    let (a, b) = (ix(self, a), ix(self, b));
                    self.push(Key::Div(a, b), Op::Div(a, b))
                }
                Node::Pow(a, k) => {
                    let a = ix(self, a);
                    self.push(Key::Pow(a, *k), Op::Pow(a, *k))
                }
                Node::Call(f, a) => {
                    let a = ix(self, a);
                    self.push(Key::Call(*f, a), Op::Call(*f, a))
                }
            };
            self.by_ptr.insert(e.ptr(), i);
        }
        self.by_ptr[&root.ptr()]
    }
}

impl Tape {
    pub fn compile(exprs: &[Expr]) -> Tape {
        let mut b = Builder { ops: Vec::new(), by_key: HashMap::new(), by_ptr: HashMap::new() };
        let outputs = exprs.iter().map(|e| b.visit(e)).collect();
        Tape { ops: b.ops, outputs }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Evaluates all outputs into `out`, using `scratch` as register file.
    pub fn eval_into(&self, t: f64, x: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let r = &*scratch;
            let v = match *op {
                Op::Const(c) => c,
                Op::T => t,
                Op::X(k) => x.get(k).copied().unwrap_or(f64::NAN),
                Op::Neg(a) => -r[a],
                Op::Add(a, b) => r[a] + r[b],
                Op::Sub(a, b) => r[a] - r[b],
                Op::Mul(a, b) => r[a] * r[b],
                Op::Div(a, b) => r[a] / r[b],
                Op::Pow(a, k) => r[a].powi(k),
                Op::Call(f, a) => f.apply(r[a]),
            };
            scratch.push(v);
        }
        for (o, &i) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[i];
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut scratch = Vec::new();
        let mut out = vec![0.0; self.outputs.len()];
        self.eval_into(t, x, &mut scratch, &mut out);
        out
    }
}

//! Disciplined-convex-programming curvature propagation, the rule-engine
//! baseline the Hessian method is compared against.
//!
//! Curvature labels (constant, affine, convex, concave, unknown) are
//! propagated post-order over the original expression DAG: weighted sums keep
//! curvature when the weights' signs cooperate, and compositions `f(g)` keep
//! it when `f`'s curvature and per-argument monotonicity line up with `g`'s
//! curvature. Sign conditions (for example `x^c` being increasing only on
//! nonnegative arguments) are resolved against the positivity analysis's
//! intervals. Products of two non-constant operands are always `unknown` —
//! the structural weakness the Hessian method overcomes.
//!
//! The built-in atom table is deliberately minimal (exp, log, sqrt, powers,
//! abs, sum, norm2 and their negations); composite atoms a modeling system
//! would special-case (logistic, log-sum-exp, entropy) are available only
//! behind the `extended_atoms` flag, as structural recognizers over affine
//! arguments.

use std::collections::HashMap;

use num_traits::{One, Signed, Zero};

use crate::ast::Func;
use crate::certificate::{Certificate, Method, TraceEntry, Verdict};
use crate::dag::{render_node, DagStore, NodeId, Op, Role, SymbolTable};
use crate::interval::Interval;
use crate::positivity::{harvest_facts, Analysis, PositivityError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    Constant,
    Affine,
    Convex,
    Concave,
    Unknown,
}

impl Curvature {
    pub fn label(self) -> &'static str {
        match self {
            Curvature::Constant => "constant",
            Curvature::Affine => "affine",
            Curvature::Convex => "convex",
            Curvature::Concave => "concave",
            Curvature::Unknown => "unknown",
        }
    }

    pub fn is_convex(self) -> bool {
        matches!(self, Curvature::Constant | Curvature::Affine | Curvature::Convex)
    }

    pub fn is_concave(self) -> bool {
        matches!(self, Curvature::Constant | Curvature::Affine | Curvature::Concave)
    }

    fn mirror(self) -> Curvature {
        match self {
            Curvature::Convex => Curvature::Concave,
            Curvature::Concave => Curvature::Convex,
            other => other,
        }
    }
}

/// Curvature of a sum of two labeled operands.
fn add_curv(a: Curvature, b: Curvature) -> Curvature {
    use Curvature::*;
    match (a, b) {
        (Constant, x) | (x, Constant) => x,
        (Affine, x) | (x, Affine) => x,
        (Convex, Convex) => Convex,
        (Concave, Concave) => Concave,
        _ => Unknown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Monotonicity {
    Increasing,
    Decreasing,
    None,
}

/// Rule 2/3 composition: `f(g)` from `f`'s curvature and monotonicity and
/// `g`'s curvature.
fn compose(f_curv: Curvature, mono: Monotonicity, g: Curvature) -> Curvature {
    use Curvature::*;
    match g {
        Constant => Constant,
        Affine => f_curv,
        Convex => match (f_curv, mono) {
            (Convex, Monotonicity::Increasing) => Convex,
            (Concave, Monotonicity::Decreasing) => Concave,
            _ => Unknown,
        },
        Concave => match (f_curv, mono) {
            (Convex, Monotonicity::Decreasing) => Convex,
            (Concave, Monotonicity::Increasing) => Concave,
            _ => Unknown,
        },
        Unknown => Unknown,
    }
}

pub struct DcpEngine<'a> {
    store: &'a DagStore,
    symbols: &'a SymbolTable,
    intervals: HashMap<NodeId, Interval>,
    extended_atoms: bool,
    memo: HashMap<NodeId, Curvature>,
    pub trace: Vec<TraceEntry>,
}

impl<'a> DcpEngine<'a> {
    pub fn new(
        store: &'a DagStore,
        symbols: &'a SymbolTable,
        intervals: HashMap<NodeId, Interval>,
        extended_atoms: bool,
    ) -> Self {
        DcpEngine {
            store,
            symbols,
            intervals,
            extended_atoms,
            memo: HashMap::new(),
            trace: Vec::new(),
        }
    }

    fn interval(&self, v: NodeId) -> Interval {
        self.intervals.get(&v).cloned().unwrap_or_else(Interval::full)
    }

    fn nonneg(&self, v: NodeId) -> bool {
        self.interval(v).subset_nonneg()
    }

    fn nonpos(&self, v: NodeId) -> bool {
        self.interval(v).subset_nonpos()
    }

    pub fn label(&mut self, v: NodeId) -> Curvature {
        if let Some(&c) = self.memo.get(&v) {
            return c;
        }
        let curv = self.compute(v);
        self.trace.push(TraceEntry {
            node: v.0,
            expr: render_node(self.store, v),
            info: curv.label().to_string(),
            rule: "dcp".to_string(),
            bindings: Default::default(),
        });
        self.memo.insert(v, curv);
        curv
    }

    fn compute(&mut self, v: NodeId) -> Curvature {
        use Curvature::*;
        if let Some(c) = self.extended_atom(v) {
            return c;
        }
        let node = self.store.node(v).clone();
        match &node.op {
            Op::Const(_) => Constant,
            Op::Var(name) => match self.symbols.get(name).map(|i| i.role) {
                Some(Role::Variable) => Affine,
                _ => Constant,
            },
            Op::Add => {
                let a = self.label(node.children[0]);
                let b = self.label(node.children[1]);
                add_curv(a, b)
            }
            Op::Sub => {
                let a = self.label(node.children[0]);
                let b = self.label(node.children[1]).mirror();
                add_curv(a, b)
            }
            Op::Neg => self.label(node.children[0]).mirror(),
            Op::Mul | Op::ElemMul => {
                let (l, r) = (node.children[0], node.children[1]);
                let (cl, cr) = (self.label(l), self.label(r));
                match (cl, cr) {
                    (Constant, _) => self.scale(l, cr),
                    (_, Constant) => self.scale(r, cl),
                    // Products of two non-constant operands are outside the
                    // rule set.
                    _ => Unknown,
                }
            }
            Op::Div | Op::ElemDiv => {
                let (l, r) = (node.children[0], node.children[1]);
                let (cl, cr) = (self.label(l), self.label(r));
                match cr {
                    // Dividing by a constant is scaling by its reciprocal,
                    // which has the same sign.
                    Constant => self.scale(r, cl),
                    _ => Unknown,
                }
            }
            Op::Pow | Op::ElemPow => self.power(node.children[0], node.children[1]),
            Op::Transpose | Op::Broadcast | Op::Diag | Op::Sum => {
                // Linear operators preserve curvature (sum is an increasing
                // affine atom; transpose/diag/broadcast rearrange entries).
                self.label(node.children[0])
            }
            Op::Norm2 => {
                let g = self.label(node.children[0]);
                match g {
                    Constant => Constant,
                    Affine => Convex,
                    _ => Unknown,
                }
            }
            Op::Apply(f) => {
                let arg = node.children[0];
                let g = self.label(arg);
                let (f_curv, mono) = self.atom(*f, arg);
                compose(f_curv, mono, g)
            }
        }
    }

    /// Constant · f: keeps curvature for nonnegative factors, mirrors it for
    /// nonpositive ones; affine operands survive any constant scale.
    fn scale(&mut self, constant: NodeId, curv: Curvature) -> Curvature {
        use Curvature::*;
        match curv {
            Constant => Constant,
            Affine => Affine,
            Convex | Concave => {
                if self.nonneg(constant) {
                    curv
                } else if self.nonpos(constant) {
                    curv.mirror()
                } else {
                    Unknown
                }
            }
            Unknown => Unknown,
        }
    }

    fn power(&mut self, base: NodeId, exponent: NodeId) -> Curvature {
        use Curvature::*;
        let c = match self.const_value(exponent) {
            Some(c) => c,
            None => return Unknown,
        };
        let g = self.label(base);
        if g == Constant {
            return Constant;
        }
        if c.is_zero() {
            return Constant;
        }
        if c.is_one() {
            return g;
        }
        let one = num_rational::BigRational::from_integer(1.into());
        let even_int = c.is_integer() && !c.to_integer().bit(0);
        let (f_curv, mono) = if even_int && c.is_positive() {
            // x^(2n): convex everywhere, monotone only on a signed domain.
            let mono = if self.nonneg(base) {
                Monotonicity::Increasing
            } else if self.nonpos(base) {
                Monotonicity::Decreasing
            } else {
                Monotonicity::None
            };
            (Convex, mono)
        } else if c >= one {
            // x^c for c ≥ 1: convex increasing on nonnegative arguments.
            if !self.nonneg(base) {
                return Unknown;
            }
            (Convex, Monotonicity::Increasing)
        } else if c.is_positive() {
            // 0 < c < 1: concave increasing on nonnegative arguments.
            if !self.nonneg(base) {
                return Unknown;
            }
            (Concave, Monotonicity::Increasing)
        } else {
            // c < 0: convex decreasing on positive arguments.
            if !self.interval(base).subset_positive() {
                return Unknown;
            }
            (Convex, Monotonicity::Decreasing)
        };
        compose(f_curv, mono, g)
    }

    /// Evaluates a constant subexpression; the original DAG is unsimplified,
    /// so exponents like `-1` or `1/2` arrive as small arithmetic trees.
    fn const_value(&self, v: NodeId) -> Option<num_rational::BigRational> {
        let node = self.store.node(v);
        match &node.op {
            Op::Const(c) => Some(c.clone()),
            Op::Neg => Some(-self.const_value(node.children[0])?),
            Op::Add => Some(self.const_value(node.children[0])? + self.const_value(node.children[1])?),
            Op::Sub => Some(self.const_value(node.children[0])? - self.const_value(node.children[1])?),
            Op::Mul => Some(self.const_value(node.children[0])? * self.const_value(node.children[1])?),
            Op::Div => {
                let d = self.const_value(node.children[1])?;
                if d.is_zero() {
                    return None;
                }
                Some(self.const_value(node.children[0])? / d)
            }
            _ => None,
        }
    }

    fn atom(&mut self, f: Func, arg: NodeId) -> (Curvature, Monotonicity) {
        use Curvature::*;
        use Monotonicity::*;
        match f {
            Func::Exp => (Convex, Increasing),
            Func::Log => (Concave, Increasing),
            Func::Sqrt => (Concave, Increasing),
            Func::Abs => {
                let mono = if self.nonneg(arg) {
                    Increasing
                } else if self.nonpos(arg) {
                    Decreasing
                } else {
                    None
                };
                (Convex, mono)
            }
            Func::Norm2 => (Convex, None),
            _ => (Unknown, None),
        }
    }

    /// CVX-style composite atoms, enabled by `--dcp-extended-atoms`:
    /// logistic `log(1+exp(u))`, log-sum-exp `log(sum(exp(u)))`, and entropy
    /// `u*log(u)` — each convex for affine `u`.
    fn extended_atom(&mut self, v: NodeId) -> Option<Curvature> {
        if !self.extended_atoms {
            return None;
        }
        let node = self.store.node(v).clone();
        match &node.op {
            Op::Apply(Func::Log) => {
                let inner = node.children[0];
                // log(sum(exp(u)))
                if let Op::Sum = self.store.op(inner) {
                    let s = self.store.children(inner)[0];
                    if let Op::Apply(Func::Exp) = self.store.op(s) {
                        let u = self.store.children(s)[0];
                        if self.label(u) == Curvature::Affine {
                            return Some(Curvature::Convex);
                        }
                    }
                }
                // log(1+exp(u))
                if let Op::Add = self.store.op(inner) {
                    let ch = self.store.children(inner).to_vec();
                    for (a, b) in [(ch[0], ch[1]), (ch[1], ch[0])] {
                        let one = matches!(self.store.op(a), Op::Const(c) if c.is_one());
                        if one {
                            if let Op::Apply(Func::Exp) = self.store.op(b) {
                                let u = self.store.children(b)[0];
                                if self.label(u) == Curvature::Affine {
                                    return Some(Curvature::Convex);
                                }
                            }
                        }
                    }
                }
                None
            }
            // u * log(u): negative entropy, convex on positive u.
            Op::Mul | Op::ElemMul => {
                let ch = node.children.clone();
                for (a, b) in [(ch[0], ch[1]), (ch[1], ch[0])] {
                    if let Op::Apply(Func::Log) = self.store.op(b) {
                        if self.store.children(b)[0] == a
                            && self.label(a) == Curvature::Affine
                        {
                            return Some(Curvature::Convex);
                        }
                    }
                }
                None
            }
            _ => None,
        }
    }
}

/// Labels every node of the DAG and wraps the root label in a certificate.
pub fn dcp_certify(
    store: &mut DagStore,
    root: NodeId,
    symbols: &SymbolTable,
    assumptions: &[crate::ast::Assumption],
    extended_atoms: bool,
) -> Result<(Certificate, Curvature), PositivityError> {
    // Interval information for sign-conditional rules comes from the same
    // positivity analysis the Hessian path uses.
    let mut facts = harvest_facts(store, root);
    let ctx = crate::simplify::SimplifyCtx::from_assumptions(assumptions);
    crate::positivity::expression_facts(store, symbols, assumptions, &ctx, &mut facts);
    let mut analysis = Analysis::new(store, symbols, assumptions, facts);
    analysis.determine(root)?;
    let intervals = analysis.into_intervals();
    let mut engine = DcpEngine::new(store, symbols, intervals, extended_atoms);
    let curv = engine.label(root);
    let verdict = match curv {
        Curvature::Constant | Curvature::Affine => Verdict::Affine,
        Curvature::Convex => Verdict::Convex,
        Curvature::Concave => Verdict::Concave,
        Curvature::Unknown => Verdict::Unknown,
    };
    let certificate = Certificate {
        verdict,
        method: Method::Dcp,
        trace: engine.trace,
        hessian_text: None,
        witness: None,
    };
    Ok((certificate, curv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::lower;
    use crate::parser::{parse, parse_assumptions};
    use crate::shape::{Dim, Shape};

    fn setup() -> (DagStore, SymbolTable) {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        s.declare(
            "X",
            Shape::Matrix(Dim::Sym("m".into()), Dim::Sym("n".into())),
            Role::Parameter,
        );
        s.declare("w", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        s.declare("y", Shape::Vector(Dim::Sym("m".into())), Role::Parameter);
        s.declare("z", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        (DagStore::new(), s)
    }

    fn curv(
        store: &mut DagStore,
        syms: &SymbolTable,
        expr: &str,
        assume: &str,
        extended: bool,
    ) -> Curvature {
        let root = lower(store, &parse(expr).unwrap(), syms).unwrap();
        let assumptions = parse_assumptions(assume).unwrap();
        let (_, c) = dcp_certify(store, root, syms, &assumptions, extended).unwrap();
        c
    }

    #[test]
    fn residual_is_affine() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "X*w-y", "", false), Curvature::Affine);
    }

    #[test]
    fn ols_is_unknown_for_dcp() {
        let (mut store, syms) = setup();
        assert_eq!(
            curv(&mut store, &syms, "(X*w-y)'*(X*w-y)", "", false),
            Curvature::Unknown
        );
    }

    #[test]
    fn entropy_is_unknown_for_dcp() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "x*log(x)", "x>0", false), Curvature::Unknown);
    }

    #[test]
    fn logistic_is_unknown_for_dcp() {
        let (mut store, syms) = setup();
        assert_eq!(
            curv(&mut store, &syms, "log(1+exp(x))", "", false),
            Curvature::Unknown
        );
    }

    #[test]
    fn sum_exp_is_convex() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "sum(exp(z))", "", false), Curvature::Convex);
    }

    #[test]
    fn negated_log_is_convex() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "-log(x)", "x>0", false), Curvature::Convex);
    }

    #[test]
    fn square_of_affine_is_convex() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "x^2", "", false), Curvature::Convex);
        assert_eq!(curv(&mut store, &syms, "(3*x-1)^2", "", false), Curvature::Convex);
    }

    #[test]
    fn reciprocal_needs_positive_base() {
        let (mut store, syms) = setup();
        assert_eq!(curv(&mut store, &syms, "x^(-1)", "x>0", false), Curvature::Convex);
        assert_eq!(curv(&mut store, &syms, "x^(-1)", "", false), Curvature::Unknown);
    }

    #[test]
    fn extended_atoms_recognize_composites() {
        let (mut store, syms) = setup();
        assert_eq!(
            curv(&mut store, &syms, "log(1+exp(x))", "", true),
            Curvature::Convex
        );
        assert_eq!(
            curv(&mut store, &syms, "log(sum(exp(z)))", "", true),
            Curvature::Convex
        );
        assert_eq!(curv(&mut store, &syms, "x*log(x)", "x>0", true), Curvature::Convex);
    }

    #[test]
    fn sign_flip_duality() {
        let (mut store, syms) = setup();
        for (expr, assume) in [
            ("sum(exp(z))", ""),
            ("-log(x)", "x>0"),
            ("x^2", ""),
            ("X*w-y", ""),
            ("x*log(x)", "x>0"),
        ] {
            let c = curv(&mut store, &syms, expr, assume, false);
            let n = curv(&mut store, &syms, &format!("-({expr})"), assume, false);
            assert_eq!(n, c.mirror(), "{expr}");
        }
    }

    #[test]
    fn norm_of_affine_is_convex() {
        let (mut store, syms) = setup();
        assert_eq!(
            curv(&mut store, &syms, "norm2(X*w-y)", "", false),
            Curvature::Convex
        );
    }
}

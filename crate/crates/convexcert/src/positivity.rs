//! Interval-based positivity analysis of Hessian DAGs.
//!
//! Every node gets an interval over the extended reals. For scalar and
//! vector nodes the interval bounds the value (entrywise); for matrix nodes
//! an interval contained in [0, ∞) encodes "positive semidefinite" and one
//! contained in (−∞, 0] encodes "negative semidefinite". Leaves start from
//! user assumptions plus domain facts harvested from the original expression
//! (an argument of `log` is positive wherever the function is defined, even
//! if the log no longer appears in the Hessian). Interior nodes combine child
//! intervals by interval arithmetic, a relational ratio bound at division
//! nodes, and structured psd templates ([`crate::templates`]).
//!
//! The analysis is memoized and runs post-order over the DAG, so each node is
//! processed exactly once — linear in DAG size, which [`Analysis::visits`]
//! instruments.

use std::collections::{HashMap, HashSet};

use num_traits::Zero;
use thiserror::Error;

use crate::ast::{Assumption, Func, Relation};
use crate::calculus::{self, CalcError};
use crate::certificate::{Certificate, Method, TraceEntry, Verdict};
use crate::dag::{render_node, DagStore, NodeId, Op, SymbolTable};
use crate::interval::{Bound, Interval};
use crate::shape::Shape;
use crate::simplify::{simplify, SimplifyCtx};
use crate::templates::{self, TemplateId};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PositivityError {
    #[error("assumptions leave no possible value for {0}")]
    EmptyDomain(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CertifyError {
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error(transparent)]
    Positivity(#[from] PositivityError),
}

/// Interval implied by a single assumption clause.
fn assumption_interval(a: &Assumption) -> Interval {
    let b = Bound::Finite(a.bound.clone());
    match a.relation {
        Relation::Gt => Interval::new(b, Bound::PosInf, true, false),
        Relation::Ge => Interval::new(b, Bound::PosInf, false, false),
        Relation::Lt => Interval::new(Bound::NegInf, b, false, true),
        Relation::Le => Interval::new(Bound::NegInf, b, false, false),
    }
}

/// Domain facts implied by function applications in `root`, keyed by the
/// restricted node. Harvested from the expression *before* differentiation,
/// since the restricting function may not survive into the Hessian.
pub fn harvest_facts(store: &DagStore, root: NodeId) -> HashMap<NodeId, Interval> {
    let mut facts: HashMap<NodeId, Interval> = HashMap::new();
    let add = |facts: &mut HashMap<NodeId, Interval>, node: NodeId, iv: Interval| {
        facts
            .entry(node)
            .and_modify(|cur| *cur = cur.intersect(&iv))
            .or_insert(iv);
    };
    for v in store.reachable(root) {
        let node = store.node(v);
        match &node.op {
            Op::Apply(Func::Log) => add(&mut facts, node.children[0], Interval::positive()),
            Op::Apply(Func::Sqrt) => add(&mut facts, node.children[0], Interval::nonneg()),
            Op::Apply(Func::Arcsin) | Op::Apply(Func::Arccos) => {
                add(&mut facts, node.children[0], Interval::closed_int(-1, 1))
            }
            Op::Pow | Op::ElemPow => {
                if let Op::Const(c) = store.op(node.children[1]) {
                    if !c.is_integer() {
                        let iv = if c < &Zero::zero() {
                            Interval::positive()
                        } else {
                            Interval::nonneg()
                        };
                        add(&mut facts, node.children[0], iv);
                    }
                }
            }
            _ => {}
        }
    }
    facts
}

/// True when an assumption subject is a plain symbol name (handled at leaf
/// nodes) rather than an expression.
pub(crate) fn subject_is_symbol(subject: &str) -> bool {
    !subject.is_empty()
        && subject
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !subject.starts_with(|c: char| c.is_ascii_digit())
}

/// Lowers assumptions whose subject is an expression (e.g. `sum(exp(x)) >= 1`)
/// into facts keyed by the canonicalized subject node, so they intersect with
/// matching subexpressions of the Hessian via hash-consing.
pub fn expression_facts(
    store: &mut DagStore,
    symbols: &SymbolTable,
    assumptions: &[Assumption],
    ctx: &SimplifyCtx,
    facts: &mut HashMap<NodeId, Interval>,
) {
    for a in assumptions {
        if subject_is_symbol(&a.subject) {
            continue;
        }
        let Ok(ast) = crate::parser::parse(&a.subject) else {
            continue;
        };
        let Ok(raw) = crate::dag::lower(store, &ast, symbols) else {
            continue;
        };
        let iv = assumption_interval(a);
        let canon = calculus::prepare(store, raw, ctx);
        for id in [raw, canon] {
            facts
                .entry(id)
                .and_modify(|e| *e = e.intersect(&iv))
                .or_insert_with(|| iv.clone());
        }
    }
}

/// The memoized interval analysis over one DAG.
pub struct Analysis<'a> {
    pub store: &'a mut DagStore,
    symbols: &'a SymbolTable,
    assumptions: &'a [Assumption],
    ctx: SimplifyCtx,
    facts: HashMap<NodeId, Interval>,
    memo: HashMap<NodeId, Interval>,
    /// Nodes reachable from the analysis root; only these count as visits.
    counted: HashSet<NodeId>,
    pub visits: usize,
    pub trace: Vec<TraceEntry>,
}

impl<'a> Analysis<'a> {
    pub fn new(
        store: &'a mut DagStore,
        symbols: &'a SymbolTable,
        assumptions: &'a [Assumption],
        facts: HashMap<NodeId, Interval>,
    ) -> Self {
        Analysis {
            store,
            symbols,
            assumptions,
            ctx: SimplifyCtx::from_assumptions(assumptions),
            facts,
            memo: HashMap::new(),
            counted: HashSet::new(),
            visits: 0,
            trace: Vec::new(),
        }
    }

    /// Consumes the analysis, yielding every interval it computed.
    pub fn into_intervals(self) -> HashMap<NodeId, Interval> {
        self.memo
    }

    /// Canonicalizes a node built during template matching so hash-consing
    /// aligns it with nodes already present in the DAG.
    pub fn resimplify(&mut self, id: NodeId) -> NodeId {
        simplify(self.store, id, &self.ctx)
    }

    /// Interval of the root, computing every reachable node exactly once in
    /// post-order.
    pub fn determine(&mut self, root: NodeId) -> Result<Interval, PositivityError> {
        let order = self.store.reachable(root);
        self.counted.extend(order.iter().copied());
        for v in order {
            self.interval(v)?;
        }
        Ok(self.memo[&root].clone())
    }

    /// Interval of an arbitrary node (memoized). Template side conditions may
    /// ask about nodes constructed during matching; those do not count toward
    /// the per-DAG visit total.
    pub fn interval(&mut self, v: NodeId) -> Result<Interval, PositivityError> {
        if let Some(iv) = self.memo.get(&v) {
            return Ok(iv.clone());
        }
        if self.counted.contains(&v) {
            self.visits += 1;
        }
        let (mut iv, rule, bindings) = self.compute(v)?;
        if let Some(fact) = self.facts.get(&v) {
            iv = iv.intersect(fact);
        }
        if iv.is_empty() {
            return Err(PositivityError::EmptyDomain(render_node(self.store, v)));
        }
        self.trace.push(TraceEntry {
            node: v.0,
            expr: render_node(self.store, v),
            info: iv.to_string(),
            rule: rule.to_string(),
            bindings,
        });
        self.memo.insert(v, iv.clone());
        Ok(iv)
    }

    #[allow(clippy::type_complexity)]
    fn compute(
        &mut self,
        v: NodeId,
    ) -> Result<(Interval, String, std::collections::BTreeMap<String, String>), PositivityError>
    {
        let node = self.store.node(v).clone();
        let no_bind = std::collections::BTreeMap::new();
        match &node.op {
            Op::Const(c) => Ok((Interval::point(c.clone()), "constant".into(), no_bind)),
            Op::Var(name) => {
                let iv = self.leaf_interval(name)?;
                Ok((iv, "leaf".into(), no_bind))
            }
            _ => {
                // Structured psd templates fire before plain arithmetic on
                // matrix-shaped nodes.
                if node.shape.is_matrix() {
                    if let Some(m) = templates::match_template(self, v)? {
                        let iv = if m.nsd { Interval::nonpos() } else { Interval::nonneg() };
                        let rule = format!("template:{}", m.template.label());
                        let mut bindings = std::collections::BTreeMap::new();
                        for (k, n) in &m.bindings {
                            bindings.insert(k.to_string(), render_node(self.store, *n));
                        }
                        if let Some(p) = m.prefactor {
                            bindings
                                .insert("prefactor".into(), render_node(self.store, p));
                        }
                        // Interval arithmetic can be strictly tighter (e.g. a
                        // zero Hessian is both psd and nsd); keep the
                        // intersection.
                        let mut child_ivs = Vec::with_capacity(node.children.len());
                        for &c in &node.children {
                            child_ivs.push(self.interval(c)?);
                        }
                        let arith = self.combine(&node.op, &node.shape, &node.children, &child_ivs);
                        return Ok((iv.intersect(&arith), rule, bindings));
                    }
                }
                let mut child_ivs = Vec::with_capacity(node.children.len());
                for &c in &node.children {
                    child_ivs.push(self.interval(c)?);
                }
                if matches!(node.op, Op::Div | Op::ElemDiv) {
                    if let Some(iv) =
                        self.ratio_bound(node.children[0], node.children[1], &child_ivs)
                    {
                        return Ok((iv, "ratio-bound".into(), no_bind));
                    }
                }
                let iv = self.combine(&node.op, &node.shape, &node.children, &child_ivs);
                if matches!(node.op, Op::Add | Op::Sub)
                    && !node.shape.is_matrix()
                    && !(iv.subset_nonneg() || iv.subset_nonpos())
                {
                    if let Some(refined) = templates::chain_sign(self, v)? {
                        return Ok((iv.intersect(&refined), "term-domination".into(), no_bind));
                    }
                }
                Ok((iv, "interval-arithmetic".into(), no_bind))
            }
        }
    }

    fn leaf_interval(&self, name: &str) -> Result<Interval, PositivityError> {
        let mut iv = Interval::full();
        if let Some(info) = self.symbols.get(name) {
            if info.psd {
                iv = iv.intersect(&Interval::nonneg());
            }
        }
        for a in self.assumptions.iter().filter(|a| a.subject == name) {
            iv = iv.intersect(&assumption_interval(a));
        }
        if iv.is_empty() {
            return Err(PositivityError::EmptyDomain(name.to_string()));
        }
        Ok(iv)
    }

    /// Relational bound: num / (num + rest) ∈ [0, 1] when num ≥ 0, every
    /// residual summand of the denominator is ≥ 0, and the denominator
    /// excludes 0.
    fn ratio_bound(
        &mut self,
        num: NodeId,
        den: NodeId,
        child_ivs: &[Interval],
    ) -> Option<Interval> {
        if !child_ivs[0].subset_nonneg() || child_ivs[1].contains_zero() {
            return None;
        }
        let mut num_leaves = Vec::new();
        add_leaves(self.store, num, true, &mut num_leaves);
        let mut den_leaves = Vec::new();
        add_leaves(self.store, den, true, &mut den_leaves);
        for n in &num_leaves {
            let pos = den_leaves.iter().position(|d| d == n)?;
            den_leaves.swap_remove(pos);
        }
        for (sign, leaf) in den_leaves {
            if !sign {
                return None;
            }
            if !self.interval(leaf).ok()?.subset_nonneg() {
                return None;
            }
        }
        Some(Interval::closed_int(0, 1))
    }

    fn combine(
        &mut self,
        op: &Op,
        _shape: &Shape,
        children: &[NodeId],
        ivs: &[Interval],
    ) -> Interval {
        match op {
            Op::Const(_) | Op::Var(_) => unreachable!("leaves handled by caller"),
            Op::Add => ivs[0].add(&ivs[1]),
            Op::Sub => ivs[0].sub(&ivs[1]),
            Op::Neg => ivs[0].neg(),
            Op::Mul => {
                let (sl, sr) = (
                    self.store.shape(children[0]).clone(),
                    self.store.shape(children[1]).clone(),
                );
                if sl.is_scalar() || sr.is_scalar() {
                    // Scalar scaling: also covers Rules 1-2 for psd/nsd
                    // matrix operands under the sign encoding.
                    ivs[0].mul(&ivs[1])
                } else if matches!(sl, Shape::RowVector(_)) && sr.is_vector() {
                    // Inner product: only the sign of Σ aᵢbᵢ is sound.
                    sign_clamp(&ivs[0].mul(&ivs[1]))
                } else {
                    // Matrix products mix entries; psd-ness of factors does
                    // not transfer. The sandwich template covers A·M·Aᵀ.
                    Interval::full()
                }
            }
            Op::Div => ivs[0].div(&ivs[1]),
            Op::ElemMul => {
                let prod = ivs[0].mul(&ivs[1]);
                if children[0] == children[1] {
                    prod.intersect(&Interval::nonneg())
                } else {
                    prod
                }
            }
            Op::ElemDiv => ivs[0].div(&ivs[1]),
            Op::Pow | Op::ElemPow => {
                if let Op::Const(c) = self.store.op(children[1]).clone() {
                    ivs[0].pow(&c)
                } else if ivs[0].subset_positive() {
                    Interval::positive()
                } else {
                    Interval::full()
                }
            }
            Op::Transpose | Op::Broadcast => ivs[0].clone(),
            Op::Sum => sum_interval(&ivs[0]),
            Op::Diag => ivs[0].clone(),
            Op::Norm2 => Interval::nonneg(),
            Op::Apply(f) => func_image(*f, &ivs[0]),
        }
    }
}

/// Keeps only sound sign information of an interval (used where magnitudes do
/// not transfer, e.g. inner products of entrywise-bounded vectors).
fn sign_clamp(iv: &Interval) -> Interval {
    if iv.subset_nonneg() && iv.subset_nonpos() {
        Interval::point_int(0)
    } else if iv.subset_positive() {
        Interval::positive()
    } else if iv.subset_nonneg() {
        Interval::nonneg()
    } else if iv.subset_of(&Interval::negative()) {
        Interval::negative()
    } else if iv.subset_nonpos() {
        Interval::nonpos()
    } else {
        Interval::full()
    }
}

/// Interval of `sum(u)` when `u`'s entries lie in `iv` and the length is an
/// unknown positive integer.
fn sum_interval(iv: &Interval) -> Interval {
    let (lo, lo_open) = if iv.subset_nonneg() {
        (iv.lo.clone(), iv.lo_open)
    } else {
        (Bound::NegInf, false)
    };
    let (hi, hi_open) = if iv.subset_nonpos() {
        (iv.hi.clone(), iv.hi_open)
    } else {
        (Bound::PosInf, false)
    };
    Interval::new(lo, hi, lo_open, hi_open)
}

/// Sound image of an elementary function over an interval.
fn func_image(f: Func, iv: &Interval) -> Interval {
    let one = Bound::Finite(num_rational::BigRational::from_integer(1.into()));
    match f {
        Func::Exp => {
            if iv.subset_positive() {
                Interval::new(one, Bound::PosInf, true, false)
            } else if iv.subset_nonneg() {
                Interval::new(one, Bound::PosInf, false, false)
            } else if iv.subset_of(&Interval::negative()) {
                Interval::new(Bound::Finite(Zero::zero()), one, true, true)
            } else if iv.subset_nonpos() {
                Interval::new(Bound::Finite(Zero::zero()), one, true, false)
            } else {
                Interval::positive()
            }
        }
        Func::Log => {
            let ge_one = Interval::new(one.clone(), Bound::PosInf, false, false);
            let gt_one = Interval::new(one.clone(), Bound::PosInf, true, false);
            let le_one = Interval::new(Bound::Finite(Zero::zero()), one.clone(), true, false);
            let lt_one = Interval::new(Bound::Finite(Zero::zero()), one, true, true);
            if iv.subset_of(&gt_one) {
                Interval::positive()
            } else if iv.subset_of(&ge_one) {
                Interval::nonneg()
            } else if iv.subset_of(&lt_one) {
                Interval::negative()
            } else if iv.subset_of(&le_one) {
                Interval::nonpos()
            } else {
                Interval::full()
            }
        }
        Func::Sqrt => {
            if iv.subset_positive() {
                Interval::positive()
            } else {
                Interval::nonneg()
            }
        }
        Func::Abs => Interval::nonneg(),
        Func::Sign | Func::Sin | Func::Cos => Interval::closed_int(-1, 1),
        Func::Cosh => Interval::new(one, Bound::PosInf, false, false),
        Func::Arccos => Interval::nonneg(),
        // Odd, sign-preserving functions.
        Func::Sinh | Func::Arcsin | Func::Arctan | Func::Tan => sign_preserve(iv, f),
        Func::Tanh => sign_preserve(iv, f).intersect(&Interval::new(
            Bound::Finite(num_rational::BigRational::from_integer((-1).into())),
            Bound::Finite(num_rational::BigRational::from_integer(1.into())),
            true,
            true,
        )),
        Func::Sum | Func::Diag | Func::Norm2 | Func::Vector => Interval::full(),
    }
}

fn sign_preserve(iv: &Interval, f: Func) -> Interval {
    // tan preserves sign only within (−π/2, π/2); without magnitude bounds we
    // cannot check that, so it stays unconstrained.
    if f == Func::Tan {
        return Interval::full();
    }
    if iv.subset_positive() {
        Interval::positive()
    } else if iv.subset_nonneg() {
        Interval::nonneg()
    } else if iv.subset_of(&Interval::negative()) {
        Interval::negative()
    } else if iv.subset_nonpos() {
        Interval::nonpos()
    } else {
        Interval::full()
    }
}

/// Flattens an Add/Sub/Neg tree into signed summands.
pub(crate) fn add_leaves(
    store: &DagStore,
    id: NodeId,
    sign: bool,
    out: &mut Vec<(bool, NodeId)>,
) {
    match store.op(id) {
        Op::Add => {
            let ch = store.children(id).to_vec();
            add_leaves(store, ch[0], sign, out);
            add_leaves(store, ch[1], sign, out);
        }
        Op::Sub => {
            let ch = store.children(id).to_vec();
            add_leaves(store, ch[0], sign, out);
            add_leaves(store, ch[1], !sign, out);
        }
        Op::Neg => {
            let c = store.children(id)[0];
            add_leaves(store, c, !sign, out);
        }
        _ => out.push((sign, id)),
    }
}

/// Outcome of a Hessian-method certification run, with the raw pieces the
/// CLI and acceptance tests need alongside the certificate.
#[derive(Debug)]
pub struct CertifyOutcome {
    pub certificate: Certificate,
    pub gradient: NodeId,
    pub hessian: NodeId,
    pub root_interval: Interval,
    pub visits: usize,
    pub dag_nodes: usize,
    /// For unknown verdicts: the deepest trace entry whose interval is
    /// indefinite, i.e. the node that blocked certification.
    pub blocking: Option<TraceEntry>,
}

/// Full Hessian pipeline: prepare, differentiate twice, simplify, analyze.
pub fn certify(
    store: &mut DagStore,
    root: NodeId,
    wrt: &str,
    wrt_shape: &Shape,
    symbols: &SymbolTable,
    assumptions: &[Assumption],
) -> Result<CertifyOutcome, CertifyError> {
    let ctx = SimplifyCtx::from_assumptions(assumptions);
    let prepared = calculus::prepare(store, root, &ctx);
    let mut facts = harvest_facts(store, prepared);
    expression_facts(store, symbols, assumptions, &ctx, &mut facts);
    let res = calculus::hessian(store, prepared, wrt, wrt_shape, &ctx)?;
    let dag_nodes = store.reachable(res.hessian).len();
    let mut analysis = Analysis::new(store, symbols, assumptions, facts);
    let iv = analysis.determine(res.hessian)?;
    let verdict = if iv.subset_nonneg() && iv.subset_nonpos() {
        Verdict::Affine
    } else if iv.subset_nonneg() {
        Verdict::Convex
    } else if iv.subset_nonpos() {
        Verdict::Concave
    } else {
        Verdict::Unknown
    };
    let visits = analysis.visits;
    // For an unknown verdict, point at the deepest node whose interval is
    // indefinite — the first place positivity information was lost.
    let blocking = if verdict == Verdict::Unknown {
        analysis
            .trace
            .iter()
            .find(|e| {
                analysis
                    .memo
                    .get(&NodeId(e.node))
                    .map(|iv| !iv.subset_nonneg() && !iv.subset_nonpos())
                    .unwrap_or(false)
            })
            .cloned()
    } else {
        None
    };
    let trace = std::mem::take(&mut analysis.trace);
    let certificate = Certificate {
        verdict,
        method: Method::Hessian,
        trace,
        hessian_text: Some(render_node(store, res.hessian)),
        witness: None,
    };
    Ok(CertifyOutcome {
        certificate,
        gradient: res.gradient,
        hessian: res.hessian,
        root_interval: iv,
        visits,
        dag_nodes,
        blocking,
    })
}

// Re-exported for the templates module's trace rendering.
impl TemplateId {
    pub fn label(&self) -> &'static str {
        match self {
            TemplateId::Sandwich => "sandwich",
            TemplateId::Variance => "variance",
            TemplateId::GeneralizedVariance => "generalized-variance",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{lower, Role};
    use crate::parser::{parse, parse_assumptions};
    use crate::shape::Dim;

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

    fn run(
        store: &mut DagStore,
        syms: &SymbolTable,
        expr: &str,
        assume: &str,
        wrt: &str,
    ) -> CertifyOutcome {
        let root = lower(store, &parse(expr).unwrap(), syms).unwrap();
        let assumptions = parse_assumptions(assume).unwrap();
        let shape = syms.get(wrt).unwrap().shape.clone();
        certify(store, root, wrt, &shape, syms, &assumptions).unwrap()
    }

    #[test]
    fn ols_is_convex() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "(X*w-y)'*(X*w-y)", "", "w");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
    }

    #[test]
    fn entropy_is_convex_on_positives() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "x*log(x)", "x>0", "x");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
    }

    #[test]
    fn entropy_convex_even_without_assumption() {
        // The log in the original expression restricts x to (0, ∞).
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "x*log(x)", "", "x");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
    }

    #[test]
    fn logistic_trace_matches_figure() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "log(1+exp(x))", "", "x");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
        let find = |expr: &str| {
            out.certificate
                .trace
                .iter()
                .find(|t| t.expr == expr)
                .unwrap_or_else(|| panic!("no trace entry for {expr}"))
                .info
                .clone()
        };
        assert_eq!(find("exp(x)"), "(0, +inf)");
        assert_eq!(find("(1 + exp(x))"), "(1, +inf)");
        assert_eq!(find("(exp(x) / (1 + exp(x)))"), "[0, 1]");
        assert_eq!(find("(1 - (exp(x) / (1 + exp(x))))"), "[0, 1]");
        assert_eq!(out.root_interval.to_string(), "[0, 1]");
    }

    #[test]
    fn cubic_is_unknown() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "x^3", "", "x");
        assert_eq!(out.certificate.verdict, Verdict::Unknown);
    }

    #[test]
    fn negative_entropy_is_concave() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "-(x*log(x))", "x>0", "x");
        assert_eq!(out.certificate.verdict, Verdict::Concave);
    }

    #[test]
    fn affine_has_zero_hessian() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "3*x+2", "", "x");
        assert_eq!(out.certificate.verdict, Verdict::Affine);
    }

    #[test]
    fn visit_count_is_linear() {
        let (mut store, syms) = setup();
        for (expr, assume, wrt) in [
            ("(X*w-y)'*(X*w-y)", "", "w"),
            ("x*log(x)", "x>0", "x"),
            ("log(1+exp(x))", "", "x"),
            ("log(sum(exp(z)))", "", "z"),
        ] {
            let out = run(&mut store, &syms, expr, assume, wrt);
            assert_eq!(out.visits, out.dag_nodes, "{expr}");
        }
    }

    #[test]
    fn log_sum_exp_is_convex() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "log(sum(exp(z)))", "", "z");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
        assert!(out
            .certificate
            .trace
            .iter()
            .any(|t| t.rule.starts_with("template:")));
    }

    #[test]
    fn contradictory_assumptions_error() {
        let (mut store, syms) = setup();
        let root = lower(&mut store, &parse("x*log(x)").unwrap(), &syms).unwrap();
        let assumptions = parse_assumptions("x<0").unwrap();
        let err = certify(&mut store, root, "x", &Shape::Scalar, &syms, &assumptions)
            .unwrap_err();
        assert!(matches!(err, CertifyError::Positivity(_)));
    }

    #[test]
    fn reciprocal_is_convex_on_positives() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "x^(-1)", "x>0", "x");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
    }

    #[test]
    fn power_four_is_convex() {
        let (mut store, syms) = setup();
        let out = run(&mut store, &syms, "x^4", "", "x");
        assert_eq!(out.certificate.verdict, Verdict::Convex);
    }

    #[test]
    fn tightening_assumptions_never_widens() {
        let (mut store, syms) = setup();
        let loose = run(&mut store, &syms, "x*log(x)", "x>0", "x");
        let tight = run(&mut store, &syms, "x*log(x)", "x>=1", "x");
        assert!(tight.root_interval.subset_of(&loose.root_interval));
    }
}

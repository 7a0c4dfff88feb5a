//! Fixed-point rewriting of normalized DAGs into canonical form.
//!
//! The rewrite set is deliberately small: constant folding, multiplicative
//! canonicalization of scalar and elementwise monomials (combining like
//! bases, so `x*x -> x^2` and `x*(1/x) -> 1`), additive like-term collection
//! with common-factor extraction (`q - q*q -> q*(1 - q)`), transpose
//! pushdown (`(A*B)' -> B'*A'`), scalar hoisting out of matrix products, and
//! a handful of structural identities on `diag`/`sum`/`vector(1)`. There is
//! no equality saturation; the rules are directional and reach a fixed point
//! in one bottom-up pass.
//!
//! Cancellation of a base whose exponents sum to zero is always allowed: a
//! zero exponent can only arise when a negative power of the base occurs, and
//! the presence of that power already restricts the domain to points where
//! the base is nonzero.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::ast::{Assumption, Func, Relation};
use crate::dag::{DagStore, NodeId, Op};
use crate::shape::{Dim, Shape};

type Rat = BigRational;

#[cfg(test)]
fn rat(n: i64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

/// Variable sign facts the simplifier may rely on, harvested from the
/// assumption clauses.
#[derive(Debug, Clone, Default)]
pub struct SimplifyCtx {
    pub positive: HashSet<String>,
    pub nonneg: HashSet<String>,
}

impl SimplifyCtx {
    pub fn from_assumptions(assumptions: &[Assumption]) -> SimplifyCtx {
        let mut ctx = SimplifyCtx::default();
        for a in assumptions {
            match a.relation {
                Relation::Gt if !a.bound.is_negative() => {
                    ctx.positive.insert(a.subject.clone());
                    ctx.nonneg.insert(a.subject.clone());
                }
                Relation::Ge if a.bound.is_positive() => {
                    ctx.positive.insert(a.subject.clone());
                    ctx.nonneg.insert(a.subject.clone());
                }
                Relation::Ge if a.bound.is_zero() => {
                    ctx.nonneg.insert(a.subject.clone());
                }
                _ => {}
            }
        }
        ctx
    }
}

/// Rewrites the sub-DAG under `root` to its canonical form.
pub fn simplify(store: &mut DagStore, root: NodeId, ctx: &SimplifyCtx) -> NodeId {
    Simplifier {
        store,
        ctx,
        memo: HashMap::new(),
    }
    .go(root)
}

/// A multiplicative base. `Exp(u)` stands for `exp(u)` so that
/// `exp(u)*exp(v)` and `exp(2*u) = exp(u)^2` combine by exponent addition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum FactorKey {
    Node(NodeId),
    Exp(NodeId),
}

type FactorMap = BTreeMap<FactorKey, Rat>;

/// Canonical core of an additive term: scalar factors and (for vector sums)
/// elementwise vector factors.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default)]
struct TermKey {
    scalar: FactorMap,
    vector: FactorMap,
}

struct Simplifier<'a> {
    store: &'a mut DagStore,
    ctx: &'a SimplifyCtx,
    memo: HashMap<NodeId, NodeId>,
}

impl<'a> Simplifier<'a> {
    fn go(&mut self, id: NodeId) -> NodeId {
        if let Some(&out) = self.memo.get(&id) {
            return out;
        }
        let node = self.store.node(id).clone();
        if matches!(node.op, Op::Const(_) | Op::Var(_)) {
            self.memo.insert(id, id);
            return id;
        }
        let children: Vec<NodeId> = node.children.iter().map(|&c| self.go(c)).collect();
        let out = self.rebuild(node.op, children, &node.shape);
        self.memo.insert(id, out);
        out
    }

    fn mk(&mut self, op: Op, children: Vec<NodeId>) -> NodeId {
        self.store
            .mk(op, children)
            .expect("rewrite preserves shapes")
    }

    /// Canonicalizes a freshly constructed node whose children are already
    /// canonical.
    fn resim(&mut self, id: NodeId) -> NodeId {
        let node = self.store.node(id).clone();
        if matches!(node.op, Op::Const(_) | Op::Var(_)) {
            return id;
        }
        self.rebuild(node.op, node.children, &node.shape)
    }

    fn rebuild(&mut self, op: Op, children: Vec<NodeId>, shape: &Shape) -> NodeId {
        match op {
            Op::Const(_) | Op::Var(_) => self.store.mk(op, children).expect("leaf"),
            Op::Broadcast => {
                let dim = match shape {
                    Shape::Vector(d) => d.clone(),
                    _ => unreachable!("vector(c) is vector-shaped"),
                };
                self.store.mk_broadcast(children[0], dim)
            }
            Op::Add | Op::Sub | Op::Neg => self.sum_like(op, children, shape),
            Op::Mul | Op::Div => self.product_like(op, children, shape),
            Op::Pow => {
                if matches!(self.store.op(children[1]), Op::Const(_)) {
                    let raw = self.mk(Op::Pow, children);
                    self.canon_scalar(raw)
                } else {
                    self.mk(Op::Pow, children)
                }
            }
            Op::ElemMul | Op::ElemDiv | Op::ElemPow => {
                let raw = self.mk(op, children);
                if self.store.shape(raw).is_scalar() {
                    self.canon_scalar(raw)
                } else {
                    self.canon_elem(raw)
                }
            }
            Op::Transpose => self.tr(children[0]),
            Op::Apply(f) => self.apply_rules(f, children[0]),
            Op::Sum => self.sum_rules(children[0]),
            Op::Diag | Op::Norm2 => self.mk(op, children),
        }
    }

    // ----- additive collection -------------------------------------------

    fn sum_like(&mut self, op: Op, children: Vec<NodeId>, shape: &Shape) -> NodeId {
        match shape {
            Shape::Scalar => {
                let raw = self.mk(op, children);
                self.canon_terms(raw)
            }
            Shape::Vector(_) => {
                let raw = self.mk(op, children);
                let mut leaves = Vec::new();
                self.add_leaves(raw, true, &mut leaves);
                if leaves.iter().any(|&(_, l)| self.has_matrix_factor(l)) {
                    self.canon_matrix_sum(raw)
                } else {
                    self.canon_terms(raw)
                }
            }
            Shape::RowVector(_) => {
                // Transpose the operands, collect as a column-vector sum, and
                // transpose back.
                let cols: Vec<NodeId> = children.iter().map(|&c| self.tr(c)).collect();
                let inner = self.sum_like(op, cols.clone(), &self.store.shape(cols[0]).clone());
                self.mk(Op::Transpose, vec![inner])
            }
            Shape::Matrix(..) => {
                let raw = self.mk(op, children);
                self.canon_matrix_sum(raw)
            }
        }
    }

    fn product_like(&mut self, op: Op, children: Vec<NodeId>, shape: &Shape) -> NodeId {
        let any_matrix = children
            .iter()
            .any(|&c| !matches!(self.store.shape(c), Shape::Scalar | Shape::Vector(_)));
        let raw = self.mk(op, children);
        if shape.is_scalar() && !any_matrix {
            self.canon_scalar(raw)
        } else if !any_matrix
            && !shape.is_matrix()
            && !matches!(shape, Shape::RowVector(_))
            && !self.has_matrix_factor(raw)
        {
            self.canon_elem(raw)
        } else {
            self.canon_matrix_sum(raw)
        }
    }

    /// Whether a non-scalar product/sum tree contains a matrix-shaped factor,
    /// i.e. must be treated as a matrix chain rather than elementwise.
    fn has_matrix_factor(&self, id: NodeId) -> bool {
        if self.store.shape(id).is_scalar() {
            return false;
        }
        match self.store.op(id) {
            Op::Mul | Op::Div | Op::Add | Op::Sub | Op::Neg => self
                .store
                .children(id)
                .iter()
                .any(|&c| self.has_matrix_factor(c)),
            _ => self.store.shape(id).is_matrix(),
        }
    }

    /// Collects the additive leaves of an Add/Sub/Neg chain.
    fn add_leaves(&self, id: NodeId, sign: bool, out: &mut Vec<(bool, NodeId)>) {
        match self.store.op(id) {
            Op::Add => {
                let ch = self.store.children(id).to_vec();
                self.add_leaves(ch[0], sign, out);
                self.add_leaves(ch[1], sign, out);
            }
            Op::Sub => {
                let ch = self.store.children(id).to_vec();
                self.add_leaves(ch[0], sign, out);
                self.add_leaves(ch[1], !sign, out);
            }
            Op::Neg => {
                let c = self.store.children(id)[0];
                self.add_leaves(c, !sign, out);
            }
            _ => out.push((sign, id)),
        }
    }

    /// Scalar or elementwise-vector sum: combine like terms, then try to
    /// extract a common multiplicative factor.
    fn canon_terms(&mut self, raw: NodeId) -> NodeId {
        let shape = self.store.shape(raw).clone();
        let mut leaves = Vec::new();
        self.add_leaves(raw, true, &mut leaves);
        let mut terms: BTreeMap<TermKey, Rat> = BTreeMap::new();
        for (pos, leaf) in leaves {
            let (mut coeff, key) = self.decompose_term(leaf, &shape);
            if !pos {
                coeff = -coeff;
            }
            let entry = terms.entry(key).or_insert_with(Rat::zero);
            *entry += coeff;
        }
        terms.retain(|_, c| !c.is_zero());
        self.build_terms(terms, &shape)
    }

    fn decompose_term(&mut self, leaf: NodeId, shape: &Shape) -> (Rat, TermKey) {
        let mut coeff = Rat::one();
        let mut key = TermKey::default();
        if shape.is_scalar() {
            self.decompose_scalar_into(leaf, &Rat::one(), &mut coeff, &mut key.scalar);
        } else {
            self.decompose_elem_into(leaf, &Rat::one(), &mut coeff, &mut key);
        }
        (coeff, key)
    }

    fn build_terms(&mut self, terms: BTreeMap<TermKey, Rat>, shape: &Shape) -> NodeId {
        if terms.is_empty() {
            return self.zero(shape);
        }
        if terms.len() == 1 {
            let (key, coeff) = terms.into_iter().next().unwrap();
            return self.build_signed_term(&coeff, &key, shape);
        }
        if let Some(common) = common_factor(terms.keys()) {
            let cofactors: BTreeMap<TermKey, Rat> = terms
                .into_iter()
                .map(|(k, c)| (subtract_factors(&k, &common), c))
                .collect();
            let inner = self.build_terms(cofactors, shape);
            let mut combined = common;
            let inner_key = if self.store.shape(inner).is_scalar() {
                &mut combined.scalar
            } else {
                &mut combined.vector
            };
            *inner_key.entry(FactorKey::Node(inner)).or_insert_with(Rat::zero) += Rat::one();
            return self.build_term(&Rat::one(), &combined, shape);
        }
        // Canonical order: constant term first, then cores by node id.
        let mut built: Vec<(Rat, NodeId, bool)> = terms
            .into_iter()
            .map(|(key, coeff)| {
                let constant = key.scalar.is_empty() && key.vector.is_empty();
                let node = self.build_term(&coeff.abs(), &key, shape);
                (coeff, node, constant)
            })
            .collect();
        built.sort_by_key(|(_, node, constant)| (!*constant, *node));
        let mut acc: Option<NodeId> = None;
        for (coeff, node, _) in built.iter().filter(|(c, _, _)| c.is_positive()) {
            let _ = coeff;
            acc = Some(match acc {
                None => *node,
                Some(a) => self.mk(Op::Add, vec![a, *node]),
            });
        }
        let negs: Vec<NodeId> = built
            .iter()
            .filter(|(c, _, _)| c.is_negative())
            .map(|(_, n, _)| *n)
            .collect();
        match acc {
            Some(mut a) => {
                for n in negs {
                    a = self.mk(Op::Sub, vec![a, n]);
                }
                a
            }
            None => {
                let mut a = negs[0];
                for &n in &negs[1..] {
                    a = self.mk(Op::Add, vec![a, n]);
                }
                self.mk(Op::Neg, vec![a])
            }
        }
    }

    fn build_signed_term(&mut self, coeff: &Rat, key: &TermKey, shape: &Shape) -> NodeId {
        if coeff.is_negative() {
            let inner = self.build_term(&-coeff.clone(), key, shape);
            self.mk(Op::Neg, vec![inner])
        } else {
            self.build_term(coeff, key, shape)
        }
    }

    /// Builds `coeff * factors` for a non-negative coefficient.
    fn build_term(&mut self, coeff: &Rat, key: &TermKey, shape: &Shape) -> NodeId {
        if shape.is_scalar() {
            self.build_scalar_monomial(coeff.clone(), &key.scalar)
        } else {
            let dim = match shape {
                Shape::Vector(d) => d.clone(),
                _ => unreachable!("elementwise terms are vectors"),
            };
            self.build_elem_monomial(coeff.clone(), key, &dim)
        }
    }

    fn zero(&mut self, shape: &Shape) -> NodeId {
        let z = self.store.mk_int(0);
        match shape {
            Shape::Scalar => z,
            Shape::Vector(d) => self.store.mk_broadcast(z, d.clone()),
            Shape::RowVector(d) => {
                let v = self.store.mk_broadcast(z, d.clone());
                self.mk(Op::Transpose, vec![v])
            }
            Shape::Matrix(..) => unreachable!("matrix zeros built in canon_matrix_sum"),
        }
    }

    // ----- scalar monomials ----------------------------------------------

    fn canon_scalar(&mut self, raw: NodeId) -> NodeId {
        let mut coeff = Rat::one();
        let mut map = FactorMap::new();
        self.decompose_scalar_into(raw, &Rat::one(), &mut coeff, &mut map);
        self.build_scalar_monomial(coeff, &map)
    }

    fn decompose_scalar_into(&mut self, id: NodeId, e: &Rat, coeff: &mut Rat, map: &mut FactorMap) {
        if coeff.is_zero() || e.is_zero() {
            return;
        }
        let node = self.store.node(id).clone();
        if !node.shape.is_scalar() {
            // Scalar-valued products of tensors (inner products) are atomic.
            push_factor(map, FactorKey::Node(id), e.clone());
            return;
        }
        match &node.op {
            Op::Const(c) => {
                if c.is_zero() {
                    if e.is_positive() {
                        *coeff = Rat::zero();
                    } else {
                        push_factor(map, FactorKey::Node(id), e.clone());
                    }
                } else if let Some(v) = rat_pow_exact(c, e) {
                    *coeff *= v;
                } else {
                    push_factor(map, FactorKey::Node(id), e.clone());
                }
            }
            Op::Neg => {
                if e.is_integer() {
                    if e.to_integer().bit(0) {
                        *coeff = -coeff.clone();
                    }
                    self.decompose_scalar_into(node.children[0], e, coeff, map);
                } else {
                    push_factor(map, FactorKey::Node(id), e.clone());
                }
            }
            Op::Mul => {
                // Inner products are scalar-shaped with tensor children; keep
                // them whole so factor order (row times column) survives.
                if node.children.iter().any(|&c| !self.store.shape(c).is_scalar()) {
                    push_factor(map, FactorKey::Node(id), e.clone());
                } else {
                    self.decompose_scalar_into(node.children[0], e, coeff, map);
                    self.decompose_scalar_into(node.children[1], e, coeff, map);
                }
            }
            Op::Div => {
                self.decompose_scalar_into(node.children[0], e, coeff, map);
                let ne = -e.clone();
                self.decompose_scalar_into(node.children[1], &ne, coeff, map);
            }
            Op::Pow => {
                if let Op::Const(c) = self.store.op(node.children[1]).clone() {
                    // (b^c)^e = b^(ce) needs e integral or b >= 0.
                    if e.is_integer() || self.nonneg_hint(node.children[0]) {
                        let ce = c * e;
                        self.decompose_scalar_into(node.children[0], &ce, coeff, map);
                    } else {
                        push_factor(map, FactorKey::Node(id), e.clone());
                    }
                } else {
                    push_factor(map, FactorKey::Node(id), e.clone());
                }
            }
            Op::Apply(Func::Exp) => {
                let (mult, core) = self.strip_scale(node.children[0]);
                push_factor(map, FactorKey::Exp(core), e * mult);
            }
            Op::Apply(Func::Sqrt) => {
                let half = Rat::new(BigInt::from(1), BigInt::from(2));
                let he = e * half;
                self.decompose_scalar_into(node.children[0], &he, coeff, map);
            }
            _ => push_factor(map, FactorKey::Node(id), e.clone()),
        }
    }

    /// Splits `c * u` / `-u` off a scalar or vector expression, for the
    /// `exp(c*u) = exp(u)^c` base normalization.
    fn strip_scale(&self, id: NodeId) -> (Rat, NodeId) {
        let node = self.store.node(id);
        match &node.op {
            Op::Neg => (-Rat::one(), node.children[0]),
            Op::Mul => {
                if let Op::Const(c) = self.store.op(node.children[0]) {
                    (c.clone(), node.children[1])
                } else {
                    (Rat::one(), id)
                }
            }
            _ => (Rat::one(), id),
        }
    }

    fn factor_base(&mut self, key: &FactorKey, exp: &Rat) -> (NodeId, Rat) {
        match key {
            FactorKey::Node(id) => (*id, exp.clone()),
            FactorKey::Exp(u) => {
                let inner = if exp.is_one() {
                    *u
                } else if *exp == -Rat::one() {
                    self.mk(Op::Neg, vec![*u])
                } else {
                    let c = self.store.mk_const(exp.clone());
                    self.mk(Op::Mul, vec![c, *u])
                };
                (self.mk(Op::Apply(Func::Exp), vec![inner]), Rat::one())
            }
        }
    }

    fn build_scalar_monomial(&mut self, coeff: Rat, map: &FactorMap) -> NodeId {
        if coeff.is_zero() {
            return self.store.mk_int(0);
        }
        let negative = coeff.is_negative();
        let coeff = coeff.abs();
        let mut num: Vec<(NodeId, Rat)> = Vec::new();
        let mut den: Vec<(NodeId, Rat)> = Vec::new();
        for (key, exp) in map {
            if exp.is_zero() {
                continue;
            }
            if exp.is_positive() {
                let (base, e) = self.factor_base(key, exp);
                num.push((base, e));
            } else {
                match key {
                    // exp(u)^-e stays in the numerator as exp(-e*u).
                    FactorKey::Exp(_) => {
                        let (base, e) = self.factor_base(key, exp);
                        num.push((base, e));
                    }
                    FactorKey::Node(_) => {
                        let (base, e) = self.factor_base(key, &-exp.clone());
                        den.push((base, e));
                    }
                }
            }
        }
        num.sort_by_key(|(n, _)| *n);
        den.sort_by_key(|(n, _)| *n);
        // Additive-chain numerator factors multiply outside the ratio, so
        // q*(1-q) stays factored instead of recombining over the common
        // denominator.
        let (composite, simple): (Vec<_>, Vec<_>) = num
            .into_iter()
            .partition(|(n, _)| matches!(self.store.op(*n), Op::Add | Op::Sub));
        let p = self.rat_const(coeff.numer());
        let q = self.rat_const(coeff.denom());
        let plain_den = q.is_none();
        let num_node = self.chain_pow(&simple, p, Op::Mul, Op::Pow);
        let den_node = self.chain_pow(&den, q, Op::Mul, Op::Pow);
        let ratio = match (num_node, den_node) {
            (Some(n), None) => Some(n),
            (None, None) => None,
            (None, Some(d)) => Some(self.reciprocal(d, &den, plain_den)),
            (Some(n), Some(d)) => Some(self.mk(Op::Div, vec![n, d])),
        };
        let result = self
            .chain_pow(&composite, ratio, Op::Mul, Op::Pow)
            .unwrap_or_else(|| self.store.mk_int(1));
        if negative {
            self.mk(Op::Neg, vec![result])
        } else {
            result
        }
    }

    /// `1/d`, rendered as a negative power when `d` is a single base with no
    /// constant multiplier.
    fn reciprocal(&mut self, d: NodeId, den: &[(NodeId, Rat)], plain: bool) -> NodeId {
        if plain && den.len() == 1 {
            let (base, e) = &den[0];
            let c = self.store.mk_const(-e.clone());
            self.mk(Op::Pow, vec![*base, c])
        } else {
            let one = self.store.mk_int(1);
            self.mk(Op::Div, vec![one, d])
        }
    }

    fn rat_const(&mut self, v: &BigInt) -> Option<NodeId> {
        if v.is_one() {
            None
        } else {
            Some(self.store.mk_const(Rat::from_integer(v.clone())))
        }
    }

    fn chain_pow(
        &mut self,
        factors: &[(NodeId, Rat)],
        leading: Option<NodeId>,
        mul: Op,
        pow: Op,
    ) -> Option<NodeId> {
        let mut acc = leading;
        for (base, e) in factors {
            let f = if e.is_one() {
                *base
            } else {
                let c = self.store.mk_const(e.clone());
                self.mk(pow.clone(), vec![*base, c])
            };
            acc = Some(match acc {
                None => f,
                Some(a) => self.mk(mul.clone(), vec![a, f]),
            });
        }
        acc
    }

    // ----- elementwise (vector) monomials --------------------------------

    fn canon_elem(&mut self, raw: NodeId) -> NodeId {
        let dim = match self.store.shape(raw) {
            Shape::Vector(d) => d.clone(),
            _ => unreachable!("elementwise canon on vectors"),
        };
        let mut coeff = Rat::one();
        let mut key = TermKey::default();
        self.decompose_elem_into(raw, &Rat::one(), &mut coeff, &mut key);
        if coeff.is_negative() {
            let inner = self.build_elem_monomial(-coeff, &key, &dim);
            self.mk(Op::Neg, vec![inner])
        } else {
            self.build_elem_monomial(coeff, &key, &dim)
        }
    }

    fn decompose_elem_into(&mut self, id: NodeId, e: &Rat, coeff: &mut Rat, key: &mut TermKey) {
        if coeff.is_zero() || e.is_zero() {
            return;
        }
        let node = self.store.node(id).clone();
        if node.shape.is_scalar() {
            self.decompose_scalar_into(id, e, coeff, &mut key.scalar);
            return;
        }
        match &node.op {
            Op::Broadcast => self.decompose_scalar_into(node.children[0], e, coeff, &mut key.scalar),
            Op::Neg => {
                if e.is_integer() {
                    if e.to_integer().bit(0) {
                        *coeff = -coeff.clone();
                    }
                    self.decompose_elem_into(node.children[0], e, coeff, key);
                } else {
                    push_factor(&mut key.vector, FactorKey::Node(id), e.clone());
                }
            }
            Op::ElemMul => {
                self.decompose_elem_into(node.children[0], e, coeff, key);
                self.decompose_elem_into(node.children[1], e, coeff, key);
            }
            Op::ElemDiv => {
                self.decompose_elem_into(node.children[0], e, coeff, key);
                let ne = -e.clone();
                self.decompose_elem_into(node.children[1], &ne, coeff, key);
            }
            Op::Mul if self.store.shape(node.children[0]).is_scalar() => {
                // scalar * vector
                self.decompose_scalar_into(node.children[0], e, coeff, &mut key.scalar);
                self.decompose_elem_into(node.children[1], e, coeff, key);
            }
            Op::Div => {
                // vector / scalar
                self.decompose_elem_into(node.children[0], e, coeff, key);
                let ne = -e.clone();
                self.decompose_scalar_into(node.children[1], &ne, coeff, &mut key.scalar);
            }
            Op::ElemPow => {
                if let Op::Const(c) = self.store.op(node.children[1]).clone() {
                    if e.is_integer() || self.nonneg_hint(node.children[0]) {
                        let ce = c * e;
                        self.decompose_elem_into(node.children[0], &ce, coeff, key);
                    } else {
                        push_factor(&mut key.vector, FactorKey::Node(id), e.clone());
                    }
                } else {
                    push_factor(&mut key.vector, FactorKey::Node(id), e.clone());
                }
            }
            Op::Apply(Func::Exp) => {
                let (mult, core) = self.strip_scale(node.children[0]);
                push_factor(&mut key.vector, FactorKey::Exp(core), e * mult);
            }
            Op::Apply(Func::Sqrt) => {
                let half = Rat::new(BigInt::from(1), BigInt::from(2));
                let he = e * half;
                self.decompose_elem_into(node.children[0], &he, coeff, key);
            }
            _ => push_factor(&mut key.vector, FactorKey::Node(id), e.clone()),
        }
    }

    fn build_elem_monomial(&mut self, coeff: Rat, key: &TermKey, dim: &Dim) -> NodeId {
        let mut num: Vec<(NodeId, Rat)> = Vec::new();
        let mut den: Vec<(NodeId, Rat)> = Vec::new();
        if coeff.is_zero() {
            let z = self.store.mk_int(0);
            return self.store.mk_broadcast(z, dim.clone());
        }
        for (k, exp) in &key.vector {
            if exp.is_zero() {
                continue;
            }
            if exp.is_positive() || matches!(k, FactorKey::Exp(_)) {
                let (base, e) = self.factor_base_elem(k, exp);
                num.push((base, e));
            } else {
                let (base, e) = self.factor_base_elem(k, &-exp.clone());
                den.push((base, e));
            }
        }
        num.sort_by_key(|(n, _)| *n);
        den.sort_by_key(|(n, _)| *n);
        let (composite, simple): (Vec<_>, Vec<_>) = num
            .into_iter()
            .partition(|(n, _)| matches!(self.store.op(*n), Op::Add | Op::Sub));
        let num_node = self.chain_pow(&simple, None, Op::ElemMul, Op::ElemPow);
        let den_node = self.chain_pow(&den, None, Op::ElemMul, Op::ElemPow);
        let ratio = match (num_node, den_node) {
            (None, None) => None,
            (Some(n), None) => Some(n),
            (None, Some(d)) => {
                if den.len() == 1 {
                    let (base, e) = &den[0];
                    let c = self.store.mk_const(-e.clone());
                    Some(self.mk(Op::ElemPow, vec![*base, c]))
                } else {
                    let one = self.store.mk_int(1);
                    let ones = self.store.mk_broadcast(one, dim.clone());
                    Some(self.mk(Op::ElemDiv, vec![ones, d]))
                }
            }
            (Some(n), Some(d)) => Some(self.mk(Op::ElemDiv, vec![n, d])),
        };
        let vec_part = match self.chain_pow(&composite, ratio, Op::ElemMul, Op::ElemPow) {
            Some(v) => v,
            None => {
                // Pure scalar content: broadcast it.
                let s = self.build_scalar_monomial(coeff, &key.scalar);
                return self.store.mk_broadcast(s, dim.clone());
            }
        };
        self.apply_scalar_part(vec_part, coeff, &key.scalar)
    }

    fn factor_base_elem(&mut self, key: &FactorKey, exp: &Rat) -> (NodeId, Rat) {
        match key {
            FactorKey::Node(id) => (*id, exp.clone()),
            FactorKey::Exp(u) => {
                let inner = if exp.is_one() {
                    *u
                } else if *exp == -Rat::one() {
                    self.mk(Op::Neg, vec![*u])
                } else {
                    let c = self.store.mk_const(exp.clone());
                    self.mk(Op::Mul, vec![c, *u])
                };
                (self.mk(Op::Apply(Func::Exp), vec![inner]), Rat::one())
            }
        }
    }

    /// Wraps a tensor in its scalar multiplier `p/q * smap`: numerator
    /// factors multiply from the left, denominator factors divide.
    fn apply_scalar_part(&mut self, tensor: NodeId, coeff: Rat, smap: &FactorMap) -> NodeId {
        let mut pos = FactorMap::new();
        let mut neg = FactorMap::new();
        for (k, e) in smap {
            if e.is_zero() {
                continue;
            }
            if e.is_positive() || matches!(k, FactorKey::Exp(_)) {
                pos.insert(k.clone(), e.clone());
            } else {
                neg.insert(k.clone(), -e.clone());
            }
        }
        let num_coeff = Rat::from_integer(coeff.numer().clone());
        let den_coeff = Rat::from_integer(coeff.denom().clone());
        let mut out = tensor;
        if !num_coeff.is_one() || !pos.is_empty() {
            let s = self.build_scalar_monomial(num_coeff, &pos);
            if !matches!(self.store.op(s), Op::Const(c) if c.is_one()) {
                out = self.mk(Op::Mul, vec![s, out]);
            }
        }
        if !den_coeff.is_one() || !neg.is_empty() {
            let s = self.build_scalar_monomial(den_coeff, &neg);
            if !matches!(self.store.op(s), Op::Const(c) if c.is_one()) {
                out = self.mk(Op::Div, vec![out, s]);
            }
        }
        out
    }

    // ----- matrix products and sums --------------------------------------

    fn canon_matrix_sum(&mut self, raw: NodeId) -> NodeId {
        let shape = self.store.shape(raw).clone();
        let mut leaves = Vec::new();
        self.add_leaves(raw, true, &mut leaves);
        let mut terms: BTreeMap<(FactorMap, Vec<NodeId>), Rat> = BTreeMap::new();
        for (pos, leaf) in leaves {
            let mut coeff = Rat::one();
            let mut smap = FactorMap::new();
            let mut chain = Vec::new();
            self.decompose_mat_into(leaf, &mut coeff, &mut smap, &mut chain);
            self.peephole(&mut smap, &mut chain);
            if !pos {
                coeff = -coeff;
            }
            if coeff.is_zero() {
                continue;
            }
            *terms.entry((smap, chain)).or_insert_with(Rat::zero) += coeff;
        }
        terms.retain(|_, c| !c.is_zero());
        self.build_matrix_terms(terms, &shape, raw)
    }

    fn decompose_mat_into(
        &mut self,
        id: NodeId,
        coeff: &mut Rat,
        smap: &mut FactorMap,
        chain: &mut Vec<NodeId>,
    ) {
        let node = self.store.node(id).clone();
        if node.shape.is_scalar() && !matches!(node.op, Op::Mul) {
            self.decompose_scalar_into(id, &Rat::one(), coeff, smap);
            return;
        }
        match node.op {
            Op::Mul => {
                for c in node.children {
                    if self.store.shape(c).is_scalar() {
                        self.decompose_scalar_into(c, &Rat::one(), coeff, smap);
                    } else {
                        self.decompose_mat_into(c, coeff, smap, chain);
                    }
                }
            }
            Op::Div => {
                self.decompose_mat_into(node.children[0], coeff, smap, chain);
                let neg_one = -Rat::one();
                self.decompose_scalar_into(node.children[1], &neg_one, coeff, smap);
            }
            Op::Neg => {
                *coeff = -coeff.clone();
                self.decompose_mat_into(node.children[0], coeff, smap, chain);
            }
            _ => chain.push(id),
        }
    }

    /// Local rules over adjacent chain factors, applied to a fixed point.
    fn peephole(&mut self, smap: &mut FactorMap, chain: &mut Vec<NodeId>) {
        'outer: loop {
            // Drop identity factors diag(vector(1)).
            if chain.len() > 1 {
                for i in 0..chain.len() {
                    if self.is_identity(chain[i]) {
                        chain.remove(i);
                        continue 'outer;
                    }
                }
            }
            for i in 0..chain.len().saturating_sub(1) {
                let (a, b) = (chain[i], chain[i + 1]);
                if let Some(merged) = self.merge_pair(a, b) {
                    if self.store.shape(merged).is_scalar() {
                        let mut c = Rat::one();
                        self.decompose_scalar_into(merged, &Rat::one(), &mut c, smap);
                        debug_assert!(c.is_one() || !c.is_one());
                        if !c.is_one() {
                            // Fold numeric content back into the coefficient
                            // via a constant factor.
                            let k = self.store.mk_const(c);
                            push_factor(smap, FactorKey::Node(k), Rat::one());
                        }
                        chain.splice(i..i + 2, []);
                    } else {
                        chain.splice(i..i + 2, [merged]);
                    }
                    continue 'outer;
                }
            }
            break;
        }
    }

    fn is_identity(&self, id: NodeId) -> bool {
        if let Op::Diag = self.store.op(id) {
            self.is_ones(self.store.children(id)[0])
        } else {
            false
        }
    }

    fn is_ones(&self, id: NodeId) -> bool {
        matches!(self.store.op(id), Op::Broadcast)
            && matches!(self.store.op(self.store.children(id)[0]), Op::Const(c) if c.is_one())
    }

    fn merge_pair(&mut self, a: NodeId, b: NodeId) -> Option<NodeId> {
        let (sa, sb) = (self.store.shape(a).clone(), self.store.shape(b).clone());
        // diag(u) * diag(v) -> diag(u .* v)
        if let (Op::Diag, Op::Diag) = (self.store.op(a), self.store.op(b)) {
            let (u, v) = (self.store.children(a)[0], self.store.children(b)[0]);
            let prod = self.mk(Op::ElemMul, vec![u, v]);
            let prod = self.canon_elem(prod);
            return Some(self.mk(Op::Diag, vec![prod]));
        }
        // diag(u) * v -> u .* v ; diag(u) * vector(1) -> u
        if matches!(self.store.op(a), Op::Diag) && sb.is_vector() {
            let u = self.store.children(a)[0];
            if self.is_ones(b) {
                return Some(u);
            }
            let prod = self.mk(Op::ElemMul, vec![u, b]);
            return Some(self.canon_elem(prod));
        }
        // u' * diag(v) -> (u .* v)'
        if matches!(self.store.op(b), Op::Diag) && matches!(sa, Shape::RowVector(_)) {
            if let Op::Transpose = self.store.op(a) {
                let u = self.store.children(a)[0];
                let v = self.store.children(b)[0];
                let prod = self.mk(Op::ElemMul, vec![u, v]);
                let prod = self.canon_elem(prod);
                return Some(self.mk(Op::Transpose, vec![prod]));
            }
        }
        // vector(1)' * v -> sum(v); generic row*column -> scalar product
        if matches!(sa, Shape::RowVector(_)) && sb.is_vector() {
            if let Op::Transpose = self.store.op(a) {
                let u = self.store.children(a)[0];
                if self.is_ones(u) {
                    return Some(self.sum_rules(b));
                }
            }
            return Some(self.mk(Op::Mul, vec![a, b]));
        }
        None
    }

    fn build_matrix_terms(
        &mut self,
        terms: BTreeMap<(FactorMap, Vec<NodeId>), Rat>,
        shape: &Shape,
        raw: NodeId,
    ) -> NodeId {
        if terms.is_empty() {
            // Everything cancelled: 0 * (original expression).
            let z = self.store.mk_int(0);
            return self.mk(Op::Mul, vec![z, raw]);
        }
        let mut terms: Vec<(FactorMap, Vec<NodeId>, Rat)> =
            terms.into_iter().map(|((s, ch), c)| (s, ch, c)).collect();

        // Merge coefficient-weighted diag terms: sum c_i diag(u_i) = diag(sum c_i u_i).
        let mergeable: Vec<usize> = terms
            .iter()
            .enumerate()
            .filter(|(_, (s, ch, _))| {
                s.is_empty() && ch.len() == 1 && matches!(self.store.op(ch[0]), Op::Diag)
            })
            .map(|(i, _)| i)
            .collect();
        if mergeable.len() >= 2 {
            let mut acc: Option<NodeId> = None;
            for &i in &mergeable {
                let u = self.store.children(terms[i].1[0])[0];
                let c = terms[i].2.clone();
                let t = if c.is_one() {
                    u
                } else {
                    let k = self.store.mk_const(c.abs());
                    let scaled = self.mk(Op::Mul, vec![k, u]);
                    if c.is_negative() {
                        self.mk(Op::Neg, vec![scaled])
                    } else {
                        scaled
                    }
                };
                acc = Some(match acc {
                    None => t,
                    Some(a) => self.mk(Op::Add, vec![a, t]),
                });
            }
            let merged_vec = self.resim(acc.unwrap());
            let diag = self.mk(Op::Diag, vec![merged_vec]);
            let mut kept: Vec<(FactorMap, Vec<NodeId>, Rat)> = Vec::new();
            for (i, t) in terms.into_iter().enumerate() {
                if !mergeable.contains(&i) {
                    kept.push(t);
                }
            }
            kept.push((FactorMap::new(), vec![diag], Rat::one()));
            terms = kept;
        }

        // Common prefix / suffix extraction across all terms.
        if terms.len() >= 2 {
            let mut prefix: Vec<NodeId> = Vec::new();
            let mut suffix: Vec<NodeId> = Vec::new();
            loop {
                let firsts: Vec<Option<NodeId>> =
                    terms.iter().map(|(_, ch, _)| ch.first().copied()).collect();
                if let Some(f) = firsts[0] {
                    if firsts.iter().all(|&x| x == Some(f)) {
                        for (_, ch, _) in &mut terms {
                            ch.remove(0);
                        }
                        prefix.push(f);
                        continue;
                    }
                }
                let lasts: Vec<Option<NodeId>> =
                    terms.iter().map(|(_, ch, _)| ch.last().copied()).collect();
                if let Some(l) = lasts[0] {
                    if lasts.iter().all(|&x| x == Some(l)) {
                        for (_, ch, _) in &mut terms {
                            ch.pop();
                        }
                        suffix.insert(0, l);
                        continue;
                    }
                }
                break;
            }
            if !prefix.is_empty() || !suffix.is_empty() {
                let inner_dim = if let Some(&s) = suffix.first() {
                    self.rows_of(s)
                } else {
                    match self.store.shape(*prefix.last().unwrap()) {
                        Shape::Matrix(_, n) => Some(n.clone()),
                        Shape::RowVector(n) => Some(n.clone()),
                        _ => None,
                    }
                };
                let rebuilt: Vec<NodeId> = terms
                    .iter()
                    .map(|(s, ch, c)| {
                        let t = self.mat_term(ch, s, &c.abs(), inner_dim.as_ref());
                        if c.is_negative() {
                            self.mk(Op::Neg, vec![t])
                        } else {
                            t
                        }
                    })
                    .collect();
                let mut inner = rebuilt[0];
                for &t in &rebuilt[1..] {
                    inner = self.mk(Op::Add, vec![inner, t]);
                }
                let inner = self.resim(inner);
                let mut chain = prefix;
                chain.push(inner);
                chain.extend(suffix);
                return self.chain_node(&chain, None);
            }
        }

        // Plain rebuild: positives first (ordered by core id), then Sub.
        let rows = self.shape_rows(shape);
        let built: Vec<(Rat, NodeId)> = terms
            .into_iter()
            .map(|(s, ch, c)| {
                let t = self.mat_term(&ch, &s, &c.abs(), rows.as_ref());
                (c, t)
            })
            .collect();
        let mut pos: Vec<NodeId> = built
            .iter()
            .filter(|(c, _)| c.is_positive())
            .map(|(_, n)| *n)
            .collect();
        pos.sort();
        let negs: Vec<NodeId> = built
            .iter()
            .filter(|(c, _)| c.is_negative())
            .map(|(_, n)| *n)
            .collect();
        let mut acc = if pos.is_empty() {
            let mut a = negs[0];
            for &n in &negs[1..] {
                a = self.mk(Op::Add, vec![a, n]);
            }
            return self.mk(Op::Neg, vec![a]);
        } else {
            let mut a = pos[0];
            for &n in &pos[1..] {
                a = self.mk(Op::Add, vec![a, n]);
            }
            a
        };
        for n in negs {
            acc = self.mk(Op::Sub, vec![acc, n]);
        }
        acc
    }

    /// One term of a matrix-level sum: `coeff * scalars * chain`. A term
    /// whose chain collapsed entirely to scalars is a plain monomial.
    fn mat_term(
        &mut self,
        chain: &[NodeId],
        smap: &FactorMap,
        coeff_abs: &Rat,
        dim: Option<&Dim>,
    ) -> NodeId {
        if chain.is_empty() && dim.is_none() {
            return self.build_scalar_monomial(coeff_abs.clone(), smap);
        }
        let core = self.chain_node(chain, dim);
        self.apply_scalar_part(core, coeff_abs.clone(), smap)
    }

    fn rows_of(&self, id: NodeId) -> Option<Dim> {
        match self.store.shape(id) {
            Shape::Matrix(m, _) => Some(m.clone()),
            Shape::Vector(n) => Some(n.clone()),
            Shape::RowVector(_) | Shape::Scalar => None,
        }
    }

    fn shape_rows(&self, shape: &Shape) -> Option<Dim> {
        match shape {
            Shape::Matrix(m, _) => Some(m.clone()),
            Shape::Vector(n) => Some(n.clone()),
            _ => None,
        }
    }

    /// Left-associated product of a factor chain; the empty chain is the
    /// identity matrix of the given dimension.
    fn chain_node(&mut self, chain: &[NodeId], dim: Option<&Dim>) -> NodeId {
        if chain.is_empty() {
            let one = self.store.mk_int(1);
            let ones = self
                .store
                .mk_broadcast(one, dim.expect("identity dimension known").clone());
            return self.mk(Op::Diag, vec![ones]);
        }
        let mut acc = chain[0];
        for &f in &chain[1..] {
            acc = self.mk(Op::Mul, vec![acc, f]);
        }
        acc
    }

    // ----- transpose, apply, sum -----------------------------------------

    fn tr(&mut self, id: NodeId) -> NodeId {
        let node = self.store.node(id).clone();
        if node.shape.is_scalar() {
            return id;
        }
        match node.op {
            Op::Transpose => node.children[0],
            Op::Mul => {
                let shapes: Vec<bool> = node
                    .children
                    .iter()
                    .map(|&c| self.store.shape(c).is_scalar())
                    .collect();
                if shapes[0] {
                    let t = self.tr(node.children[1]);
                    let m = self.mk(Op::Mul, vec![node.children[0], t]);
                    self.resim(m)
                } else if shapes[1] {
                    let t = self.tr(node.children[0]);
                    let m = self.mk(Op::Mul, vec![t, node.children[1]]);
                    self.resim(m)
                } else {
                    let ta = self.tr(node.children[1]);
                    let tb = self.tr(node.children[0]);
                    let m = self.mk(Op::Mul, vec![ta, tb]);
                    self.resim(m)
                }
            }
            Op::Add | Op::Sub => {
                let ta = self.tr(node.children[0]);
                let tb = self.tr(node.children[1]);
                let m = self.mk(node.op, vec![ta, tb]);
                self.resim(m)
            }
            Op::Neg => {
                let t = self.tr(node.children[0]);
                let m = self.mk(Op::Neg, vec![t]);
                self.resim(m)
            }
            Op::Div => {
                let t = self.tr(node.children[0]);
                let m = self.mk(Op::Div, vec![t, node.children[1]]);
                self.resim(m)
            }
            Op::Diag => id,
            _ => self.mk(Op::Transpose, vec![id]),
        }
    }

    fn apply_rules(&mut self, f: Func, u: NodeId) -> NodeId {
        if f == Func::Sqrt {
            let half = self.store.mk_const(Rat::new(BigInt::from(1), BigInt::from(2)));
            let op = if self.store.shape(u).is_scalar() {
                Op::Pow
            } else {
                Op::ElemPow
            };
            let p = self.mk(op, vec![u, half]);
            return self.resim(p);
        }
        match (f, self.store.op(u).clone()) {
            (Func::Log, Op::Apply(Func::Exp)) => return self.store.children(u)[0],
            // exp(log(v)) = v on the domain of log.
            (Func::Exp, Op::Apply(Func::Log)) => return self.store.children(u)[0],
            (_, Op::Const(c)) => {
                if let Some(v) = fold_apply(f, &c) {
                    return self.store.mk_const(v);
                }
            }
            _ => {}
        }
        if f == Func::Exp {
            // Route through the monomial builder so exp(2x) and exp(x)^2
            // share a canonical form.
            let raw = self.mk(Op::Apply(Func::Exp), vec![u]);
            return if self.store.shape(raw).is_scalar() {
                self.canon_scalar(raw)
            } else {
                self.canon_elem(raw)
            };
        }
        self.mk(Op::Apply(f), vec![u])
    }

    fn sum_rules(&mut self, u: NodeId) -> NodeId {
        let node = self.store.node(u).clone();
        match node.op {
            Op::Neg => {
                let s = self.sum_rules(node.children[0]);
                self.mk(Op::Neg, vec![s])
            }
            Op::Mul if self.store.shape(node.children[0]).is_scalar() => {
                let s = self.sum_rules(node.children[1]);
                let m = self.mk(Op::Mul, vec![node.children[0], s]);
                self.resim(m)
            }
            Op::Div if self.store.shape(node.children[1]).is_scalar() => {
                let s = self.sum_rules(node.children[0]);
                let m = self.mk(Op::Div, vec![s, node.children[1]]);
                self.resim(m)
            }
            Op::Transpose => self.sum_rules(node.children[0]),
            _ => self.mk(Op::Sum, vec![u]),
        }
    }

    // ----- structural sign hints -----------------------------------------

    /// Conservative structural proof that every entry of `id` is >= 0.
    fn nonneg_hint(&self, id: NodeId) -> bool {
        let node = self.store.node(id);
        match &node.op {
            Op::Const(c) => !c.is_negative(),
            Op::Var(v) => self.ctx.nonneg.contains(v) || self.ctx.positive.contains(v),
            Op::Apply(Func::Exp) | Op::Apply(Func::Cosh) | Op::Apply(Func::Sqrt) | Op::Norm2 => {
                true
            }
            Op::Pow | Op::ElemPow => {
                if let Op::Const(c) = self.store.op(node.children[1]) {
                    if c.is_integer() && !c.to_integer().bit(0) {
                        return true;
                    }
                }
                self.nonneg_hint(node.children[0])
            }
            Op::Mul | Op::ElemMul => {
                node.children[0] == node.children[1]
                    || node.children.iter().all(|&c| self.nonneg_hint(c))
            }
            Op::Div | Op::ElemDiv => node.children.iter().all(|&c| self.nonneg_hint(c)),
            Op::Add => node.children.iter().all(|&c| self.nonneg_hint(c)),
            Op::Sum | Op::Broadcast | Op::Transpose => self.nonneg_hint(node.children[0]),
            _ => false,
        }
    }
}

fn push_factor(map: &mut FactorMap, key: FactorKey, exp: Rat) {
    let entry = map.entry(key.clone()).or_insert_with(Rat::zero);
    *entry += exp;
    if entry.is_zero() {
        map.remove(&key);
    }
}

/// Greatest common factor of the term cores: for each base occurring in every
/// term, the exponent closest to zero if all agree in sign.
fn common_factor<'a>(keys: impl Iterator<Item = &'a TermKey>) -> Option<TermKey> {
    let keys: Vec<&TermKey> = keys.collect();
    let first = keys.first()?;
    let mut common = TermKey::default();
    let selectors: [(fn(&TermKey) -> &FactorMap, &mut FactorMap); 2] = [
        (|k| &k.scalar, &mut common.scalar),
        (|k| &k.vector, &mut common.vector),
    ];
    for (map_sel, out) in selectors {
        for (base, exp) in map_sel(first) {
            let mut best: Option<Rat> = Some(exp.clone());
            for k in &keys[1..] {
                match map_sel(k).get(base) {
                    Some(e) if e.is_positive() == exp.is_positive() => {
                        let b = best.take().unwrap();
                        best = Some(if e.abs() < b.abs() { e.clone() } else { b });
                    }
                    _ => {
                        best = None;
                        break;
                    }
                }
            }
            if let Some(e) = best {
                out.insert(base.clone(), e);
            }
        }
    }
    if common.scalar.is_empty() && common.vector.is_empty() {
        None
    } else {
        Some(common)
    }
}

fn subtract_factors(key: &TermKey, common: &TermKey) -> TermKey {
    let sub = |map: &FactorMap, cmap: &FactorMap| -> FactorMap {
        let mut out = map.clone();
        for (base, exp) in cmap {
            let e = out.entry(base.clone()).or_insert_with(Rat::zero);
            *e -= exp;
            if e.is_zero() {
                out.remove(base);
            }
        }
        out
    };
    TermKey {
        scalar: sub(&key.scalar, &common.scalar),
        vector: sub(&key.vector, &common.vector),
    }
}

/// Exact `c^e` when representable as a rational: integer exponents always,
/// fractional exponents via exact root extraction.
fn rat_pow_exact(c: &Rat, e: &Rat) -> Option<Rat> {
    if e.is_integer() {
        let n = e.to_integer().to_i32()?;
        if c.is_zero() && n < 0 {
            return None;
        }
        return Some(c.pow(n));
    }
    if c.is_one() {
        return Some(Rat::one());
    }
    if c.is_negative() {
        return None;
    }
    let q = e.denom().to_u32()?;
    let p = e.numer().to_i32()?;
    let root_num = num_integer::Roots::nth_root(c.numer(), q);
    let root_den = num_integer::Roots::nth_root(c.denom(), q);
    if &root_num.pow(q) == c.numer() && &root_den.pow(q) == c.denom() {
        let root = Rat::new(root_num, root_den);
        Some(root.pow(p))
    } else {
        None
    }
}

fn fold_apply(f: Func, c: &Rat) -> Option<Rat> {
    let zero = Rat::zero();
    let one = Rat::one();
    match f {
        Func::Exp if c.is_zero() => Some(one),
        Func::Log if c.is_one() => Some(zero),
        Func::Sin | Func::Tan | Func::Sinh | Func::Tanh | Func::Arcsin | Func::Arctan
            if c.is_zero() =>
        {
            Some(zero)
        }
        Func::Cos | Func::Cosh if c.is_zero() => Some(one),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{lower, render_node, DagStore, Role, SymbolTable};
    use crate::parser::parse;
    use crate::shape::{Dim, Shape};

    fn setup() -> (DagStore, SymbolTable, SimplifyCtx) {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        s.declare("y", Shape::Scalar, Role::Parameter);
        s.declare("u", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        s.declare("v", Shape::Vector(Dim::Sym("n".into())), Role::Parameter);
        s.declare("b", Shape::Vector(Dim::Sym("m".into())), Role::Parameter);
        s.declare(
            "X",
            Shape::Matrix(Dim::Sym("m".into()), Dim::Sym("n".into())),
            Role::Parameter,
        );
        s.declare(
            "M",
            Shape::Matrix(Dim::Sym("n".into()), Dim::Sym("n".into())),
            Role::Parameter,
        );
        (DagStore::new(), s, SimplifyCtx::default())
    }

    fn simp(store: &mut DagStore, syms: &SymbolTable, ctx: &SimplifyCtx, text: &str) -> NodeId {
        let root = lower(store, &parse(text).unwrap(), syms).unwrap();
        simplify(store, root, ctx)
    }

    fn check_eq(a: &str, b: &str) {
        let (mut store, syms, ctx) = setup();
        let na = simp(&mut store, &syms, &ctx, a);
        let nb = simp(&mut store, &syms, &ctx, b);
        assert_eq!(
            na,
            nb,
            "{a} -> {} but {b} -> {}",
            render_node(&store, na),
            render_node(&store, nb)
        );
    }

    #[test]
    fn zero_matrix_product_is_absorbed() {
        check_eq("0*(X'*X) + M", "M");
    }

    #[test]
    fn double_transpose_cancels() {
        check_eq("(M')'", "M");
    }

    #[test]
    fn nested_scalar_factors_hoist() {
        check_eq("2*(X'*(1*X))", "2*X'*X");
    }

    #[test]
    fn like_terms_combine() {
        check_eq("x + x", "2*x");
        check_eq("x*x + x*x", "2*x^2");
    }

    #[test]
    fn reciprocal_cancels() {
        check_eq("x*(1/x)", "1");
    }

    #[test]
    fn logistic_second_derivative_factors() {
        let (mut store, syms, ctx) = setup();
        let q = "exp(x)/(1+exp(x))";
        let h = simp(
            &mut store,
            &syms,
            &ctx,
            &format!("{q} - ({q})*({q})"),
        );
        // q - q^2 factors as q * (1 - q).
        let qn = simp(&mut store, &syms, &ctx, q);
        assert_eq!(*store.op(h), Op::Mul);
        let ch = store.children(h).to_vec();
        assert_eq!(ch[0], qn);
        assert_eq!(*store.op(ch[1]), Op::Sub);
        let sub = store.children(ch[1]).to_vec();
        assert!(matches!(store.op(sub[0]), Op::Const(c) if c.is_one()));
        assert_eq!(sub[1], qn);
    }

    #[test]
    fn elementwise_reciprocal_gives_ones() {
        let (mut store, syms, ctx) = setup();
        let n = simp(&mut store, &syms, &ctx, "u ./ u");
        assert!(matches!(store.op(n), Op::Broadcast));
    }

    #[test]
    fn log_of_exp_unwraps() {
        check_eq("log(exp(x))", "x");
    }

    #[test]
    fn exp_products_merge() {
        check_eq("exp(x)*exp(x)", "exp(2*x)");
        check_eq("exp(2*x)/exp(x)", "exp(x)");
    }

    #[test]
    fn diag_product_merges() {
        check_eq("diag(u)*diag(v)", "diag(u.*v)");
    }

    #[test]
    fn diag_sum_merges() {
        check_eq("diag(u)+diag(v)", "diag(u+v)");
    }

    #[test]
    fn transpose_distributes_over_product() {
        check_eq("(X*u)'", "u'*X'");
    }

    #[test]
    fn sqrt_squared_is_identity() {
        check_eq("sqrt(x)^2", "x");
    }

    #[test]
    fn square_of_square_combines() {
        check_eq("(x^2)^2", "x^4");
    }

    #[test]
    fn power_coefficient_form() {
        // x^-1 renders back as a division.
        let (mut store, syms, ctx) = setup();
        let n = simp(&mut store, &syms, &ctx, "1/x");
        assert_eq!(render_node(&store, n), "(1 / x)");
        assert_eq!(*store.op(n), Op::Pow);
    }

    #[test]
    fn ratio_shape_is_preserved() {
        let (mut store, syms, ctx) = setup();
        let n = simp(&mut store, &syms, &ctx, "exp(x)/(1+exp(x))");
        assert_eq!(*store.op(n), Op::Div);
    }

    #[test]
    fn common_suffix_factors_out() {
        check_eq("diag(u)*X' - diag(v)*X'", "diag(u-v)*X'");
    }

    #[test]
    fn idempotent_on_samples() {
        let (mut store, syms, ctx) = setup();
        for text in [
            "(X*u-b)'*(X*u-b)",
            "x*log(x)",
            "exp(x)/(1+exp(x)) - (exp(x)/(1+exp(x)))*(exp(x)/(1+exp(x)))",
            "diag(exp(u))/sum(exp(u)) - exp(u)*exp(u)'/(sum(exp(u))*sum(exp(u)))",
            "sum(u.*u)",
            "2*(X'*(1*X))",
        ] {
            let once = simp(&mut store, &syms, &ctx, text);
            let twice = simplify(&mut store, once, &ctx);
            assert_eq!(once, twice, "not idempotent on {text}");
        }
    }

    #[test]
    fn scalar_sum_hoists_from_sum_rules() {
        check_eq("sum(2*u)", "2*sum(u)");
        check_eq("sum(-u)", "-sum(u)");
    }

    #[test]
    fn exact_fractional_roots_fold() {
        let (mut store, syms, ctx) = setup();
        let n = simp(&mut store, &syms, &ctx, "sqrt(4)");
        assert!(matches!(store.op(n), Op::Const(c) if *c == rat(2)));
        let m = simp(&mut store, &syms, &ctx, "sqrt(2)");
        assert!(!matches!(store.op(m), Op::Const(_)));
    }
}

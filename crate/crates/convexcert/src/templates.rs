//! Structured psd matchers: quadratic sandwiches and variance-style
//! templates.
//!
//! Interval arithmetic cannot see that `AᵀA` or
//! `diag(y⊙z⊙y) − (y⊙z)(y⊙z)ᵀ/sum(z)` are positive semidefinite; these
//! matchers recognize such shapes structurally. Matching runs on canonical
//! simplified form: matrix products are flattened into a scalar prefactor and
//! an ordered factor chain, and elementwise content is compared as factor
//! multisets with rational exponents, so `y⊙z⊙y` and `y²⊙z` unify. Given the
//! diagonal content `w` and the outer-product vector `u`, the template
//! bindings are the exact solution of `y²z = w`, `yz = u` in exponent space
//! (`y = w⊘u`, `z = u²⊘w`), which reproduces the natural instantiations such
//! as `y = vector(1), z = exp(x)` for log-sum-exp.
//!
//! Side conditions (`z ≥ 0`, scaling `a ≥ 1`, shift `b ≥ 0`, nonzero
//! denominator) are checked against the positivity analysis's intervals — a
//! single source of truth. A nonpositive prefactor flips a match to an nsd
//! conclusion.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::ast::Func;
use crate::dag::{NodeId, Op};
use crate::interval::Interval;
use crate::positivity::{add_leaves, Analysis, PositivityError};
use crate::shape::{Dim, Shape};

type Rat = BigRational;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    Sandwich,
    Variance,
    GeneralizedVariance,
}

#[derive(Debug, Clone)]
pub struct TemplateMatch {
    pub template: TemplateId,
    pub bindings: BTreeMap<&'static str, NodeId>,
    pub prefactor: Option<NodeId>,
    /// The matched node is negative semidefinite (reversed orientation or
    /// nonpositive prefactor).
    pub nsd: bool,
}

/// Tries the sandwich matcher, then the (generalized) variance matcher.
pub fn match_template(
    an: &mut Analysis,
    v: NodeId,
) -> Result<Option<TemplateMatch>, PositivityError> {
    let mut chain = Vec::new();
    let mut scalars = Vec::new();
    let mut coeff = Rat::one();
    flatten_product(an, v, 1, &mut chain, &mut scalars, &mut coeff);
    // Sign of the scalar prefactor; an indefinite prefactor blocks matching.
    let mut pref_iv = Interval::point(coeff.clone());
    for (n, e) in &scalars {
        let iv = an.interval(*n)?;
        pref_iv = if *e >= 0 {
            pref_iv.mul(&iv)
        } else {
            pref_iv.div(&iv)
        };
    }
    let pref_nsd = if pref_iv.subset_nonneg() {
        false
    } else if pref_iv.subset_nonpos() {
        true
    } else {
        return Ok(None);
    };
    let prefactor = if scalars.len() == 1 && coeff.is_one() {
        Some(scalars[0].0)
    } else {
        None
    };
    let core = match sandwich_core(an, &chain)? {
        Some(m) => Some(m),
        None => {
            if chain.len() == 1 {
                match variance_core(an, chain[0])? {
                    Some(m) => Some(m),
                    None => additive_core(an, chain[0])?,
                }
            } else {
                None
            }
        }
    };
    Ok(core.map(|mut m| {
        m.nsd ^= pref_nsd;
        if m.prefactor.is_none() {
            m.prefactor = prefactor;
        }
        m
    }))
}

/// Matches AᵀA, u·uᵀ, A·M·Aᵀ with M psd/nsd, and diag(w) with signed
/// entries.
fn sandwich_core(
    an: &mut Analysis,
    chain: &[NodeId],
) -> Result<Option<TemplateMatch>, PositivityError> {
    match chain {
        [single] => {
            if let Op::Diag = an.store.op(*single) {
                let w = an.store.children(*single)[0];
                let iv = an.interval(w)?;
                let nsd = if iv.subset_nonneg() {
                    false
                } else if iv.subset_nonpos() {
                    true
                } else {
                    return Ok(None);
                };
                let mut bindings = BTreeMap::new();
                bindings.insert("w", w);
                return Ok(Some(TemplateMatch {
                    template: TemplateId::Sandwich,
                    bindings,
                    prefactor: None,
                    nsd,
                }));
            }
            Ok(None)
        }
        [p, q] => {
            if transpose_pair(an, *p, *q) {
                let mut bindings = BTreeMap::new();
                bindings.insert("A", *q);
                return Ok(Some(TemplateMatch {
                    template: TemplateId::Sandwich,
                    bindings,
                    prefactor: None,
                    nsd: false,
                }));
            }
            scaled_outer(an, *p, *q)
        }
        [p, m, q] => {
            if !transpose_pair(an, *p, *q) {
                return Ok(None);
            }
            let iv = an.interval(*m)?;
            let nsd = if iv.subset_nonneg() {
                false
            } else if iv.subset_nonpos() {
                true
            } else {
                return Ok(None);
            };
            let mut bindings = BTreeMap::new();
            bindings.insert("A", *p);
            bindings.insert("M", *m);
            Ok(Some(TemplateMatch {
                template: TemplateId::Sandwich,
                bindings,
                prefactor: None,
                nsd,
            }))
        }
        _ => Ok(None),
    }
}

/// Matches `u·wᵀ` (or `w·uᵀ`) where `w = s ⊙ u` for a broadcast scalar `s`,
/// i.e. an outer product `s·u·uᵀ` whose scalar got fused into one factor by
/// canonicalization. Psd when `s` is nonnegative, nsd when nonpositive.
fn scaled_outer(
    an: &mut Analysis,
    p: NodeId,
    q: NodeId,
) -> Result<Option<TemplateMatch>, PositivityError> {
    // Orient so `u` is the column and `w` the transposed row content.
    let (u, w) = if let Op::Transpose = an.store.op(q) {
        (p, an.store.children(q)[0])
    } else if let Op::Transpose = an.store.op(p) {
        (q, an.store.children(p)[0])
    } else {
        return Ok(None);
    };
    if !an.store.shape(u).is_vector() || !an.store.shape(w).is_vector() {
        return Ok(None);
    }
    for (num, den) in [(w, u), (u, w)] {
        let Ok(raw) = an.store.mk(Op::ElemDiv, vec![num, den]) else {
            continue;
        };
        let ratio = an.resimplify(raw);
        let Some(scalar) = broadcast_content(an, ratio) else {
            continue;
        };
        // Verify the factorization is an identity, not just a formal
        // quotient: s ⊙ den must canonicalize back to num.
        let Ok(back) = an.store.mk(Op::ElemMul, vec![ratio, den]) else {
            continue;
        };
        if an.resimplify(back) != an.resimplify(num) {
            continue;
        }
        let iv = an.interval(scalar)?;
        let nsd = if iv.subset_nonneg() {
            false
        } else if iv.subset_nonpos() {
            true
        } else {
            continue;
        };
        let mut bindings = BTreeMap::new();
        bindings.insert("A", den);
        return Ok(Some(TemplateMatch {
            template: TemplateId::Sandwich,
            bindings,
            prefactor: Some(scalar),
            nsd,
        }));
    }
    Ok(None)
}

/// If every entry of `id` is the same scalar (the node is built from
/// broadcasts and scalars by entrywise arithmetic), returns that scalar.
fn broadcast_content(an: &mut Analysis, id: NodeId) -> Option<NodeId> {
    if an.store.shape(id).is_scalar() {
        return Some(id);
    }
    let node = an.store.node(id).clone();
    let scalar_op = match node.op {
        Op::Broadcast => return Some(node.children[0]),
        Op::Add => Op::Add,
        Op::Sub => Op::Sub,
        Op::Neg => Op::Neg,
        Op::Mul | Op::ElemMul => Op::Mul,
        Op::Div | Op::ElemDiv => Op::Div,
        Op::ElemPow => Op::Pow,
        _ => return None,
    };
    let mut parts = Vec::with_capacity(node.children.len());
    for &c in &node.children {
        parts.push(broadcast_content(an, c)?);
    }
    an.store.mk(scalar_op, parts).ok()
}

/// `p` and `q` are mutual transposes.
fn transpose_pair(an: &Analysis, p: NodeId, q: NodeId) -> bool {
    if let Op::Transpose = an.store.op(p) {
        if an.store.children(p)[0] == q {
            return true;
        }
    }
    if let Op::Transpose = an.store.op(q) {
        if an.store.children(q)[0] == p {
            return true;
        }
    }
    false
}

/// Matches `diag-part − outer-part/(a(b+sum z))` at a subtraction node, in
/// either orientation.
fn variance_core(
    an: &mut Analysis,
    v: NodeId,
) -> Result<Option<TemplateMatch>, PositivityError> {
    if !matches!(an.store.op(v), Op::Sub) {
        return Ok(None);
    }
    let ch = an.store.children(v).to_vec();
    if let Some(m) = variance_oriented(an, ch[0], ch[1])? {
        return Ok(Some(m));
    }
    // Reversed orientation: outer − diag is the negated template, nsd.
    if let Some(mut m) = variance_oriented(an, ch[1], ch[0])? {
        m.nsd = !m.nsd;
        return Ok(Some(m));
    }
    Ok(None)
}

fn variance_oriented(
    an: &mut Analysis,
    left: NodeId,
    right: NodeId,
) -> Result<Option<TemplateMatch>, PositivityError> {
    // Left: scalar part times diag(w).
    let mut chain_l = Vec::new();
    let mut scalars_l = Vec::new();
    let mut coeff_l = Rat::one();
    flatten_product(an, left, 1, &mut chain_l, &mut scalars_l, &mut coeff_l);
    let w = match chain_l.as_slice() {
        [d] if matches!(an.store.op(*d), Op::Diag) => an.store.children(*d)[0],
        _ => return Ok(None),
    };
    // Right: scalar part times u·uᵀ.
    let mut chain_r = Vec::new();
    let mut scalars_r = Vec::new();
    let mut coeff_r = Rat::one();
    flatten_product(an, right, 1, &mut chain_r, &mut scalars_r, &mut coeff_r);
    let u = match chain_r.as_slice() {
        [u, ut]
            if matches!(an.store.shape(*u), Shape::Vector(_))
                && transpose_pair(an, *u, *ut) =>
        {
            *u
        }
        _ => return Ok(None),
    };
    if coeff_l.is_zero() || coeff_r.is_zero() {
        return Ok(None);
    }
    // Elementwise factor multisets of w and u.
    let (mut cw, mw) = elem_map(an, w);
    let (cu, mu) = elem_map(an, u);
    if cw.is_zero() || cu.is_zero() {
        return Ok(None);
    }
    // Fold the left scalar sign into the diag weight.
    if coeff_l.is_negative() {
        coeff_l = -coeff_l;
        cw = -cw;
    }
    // A shared negation on both terms is the negated template, nsd.
    let negated = cw.is_negative();
    if negated != coeff_r.is_negative() {
        return Ok(None);
    }
    if negated {
        cw = -cw;
        coeff_r = -coeff_r;
    }
    // Solve y²z = w, yz = u in exponent space.
    let y_map = sub_maps(&mw, &mu);
    let z_map = sub_maps(&add_maps(&mu, &mu), &mw);
    let cy = &cw / &cu;
    let cz = &cu * &cu / &cw;
    let dim = match an.store.shape(w) {
        Shape::Vector(d) => d.clone(),
        _ => return Ok(None),
    };
    let y = rebuild_elem(an, &cy, &y_map, &dim);
    let z = rebuild_elem(an, &cz, &z_map, &dim);
    if !an.interval(z)?.subset_nonneg() {
        return Ok(None);
    }
    // Denominator: pL/pR must be a(b + sum z).
    let mut d_map = scalar_map(an, &scalars_l, &mut coeff_l);
    let r_map = scalar_map(an, &scalars_r, &mut coeff_r);
    for (k, e) in r_map {
        *d_map.entry(k).or_insert_with(Rat::zero) -= e;
    }
    d_map.retain(|_, e| !e.is_zero());
    let d_coeff = coeff_l / coeff_r;
    if !d_coeff.is_positive() {
        return Ok(None);
    }
    // At most one non-sum factor is allowed, acting as the scaling a.
    let mut sum_node: Option<NodeId> = None;
    let mut sum_scale = Rat::one();
    let mut a_node: Option<NodeId> = None;
    for (k, e) in &d_map {
        if !e.is_one() {
            return Ok(None);
        }
        if sum_node.is_none() {
            if let Some(t) = denominator_matches(an, *k, z)? {
                sum_node = Some(*k);
                sum_scale = t;
                continue;
            }
        }
        if a_node.is_none() && an.interval(*k)?.subset_ge_one() {
            a_node = Some(*k);
        } else {
            return Ok(None);
        }
    }
    let sum_node = match sum_node {
        Some(s) => s,
        None => return Ok(None),
    };
    if an.interval(sum_node)?.contains_zero() {
        return Ok(None);
    }
    // b: residual summands of the denominator beyond sum(z).
    let mut leaves = Vec::new();
    add_leaves(an.store, sum_node, true, &mut leaves);
    let b_leaf = leaves
        .iter()
        .find(|(_, l)| !matches!(an.store.op(*l), Op::Sum))
        .map(|(_, l)| *l);
    // The constant scale on the matched sum folds into a.
    let a_coeff = d_coeff * sum_scale.clone();
    if a_coeff < Rat::one() || (b_leaf.is_some() && !sum_scale.is_one()) {
        return Ok(None);
    }
    if a_node.is_some() && !a_coeff.is_one() {
        return Ok(None);
    }
    let generalized = !a_coeff.is_one() || a_node.is_some() || b_leaf.is_some();
    let mut bindings = BTreeMap::new();
    bindings.insert("y", y);
    bindings.insert("z", z);
    if let Some(a) = a_node {
        bindings.insert("a", a);
    } else if !a_coeff.is_one() {
        let a = an.store.mk_const(a_coeff);
        bindings.insert("a", a);
    }
    if let Some(b) = b_leaf {
        bindings.insert("b", b);
    }
    Ok(Some(TemplateMatch {
        template: if generalized {
            TemplateId::GeneralizedVariance
        } else {
            TemplateId::Variance
        },
        bindings,
        prefactor: None,
        nsd: negated,
    }))
}

/// Checks that `node` is structurally `b + sum(t*z)` with every residual
/// `b` summand nonnegative, returning the positive constant `t`.
fn denominator_matches(
    an: &mut Analysis,
    node: NodeId,
    z: NodeId,
) -> Result<Option<Rat>, PositivityError> {
    let mut leaves = Vec::new();
    add_leaves(an.store, node, true, &mut leaves);
    let mut scale: Option<Rat> = None;
    for (sign, leaf) in leaves {
        if !sign {
            return Ok(None);
        }
        if scale.is_none() {
            if let Op::Sum = an.store.op(leaf) {
                let v = an.store.children(leaf)[0];
                if v == z {
                    scale = Some(Rat::one());
                    continue;
                }
                let (cv, mv) = elem_map(an, v);
                let (cz, mz) = elem_map(an, z);
                if mv == mz && !cz.is_zero() {
                    let t = cv / cz;
                    if t.is_positive() {
                        scale = Some(t);
                        continue;
                    }
                }
            }
        }
        if !an.interval(leaf)?.subset_nonneg() {
            return Ok(None);
        }
    }
    Ok(scale)
}

// ----- product flattening -------------------------------------------------

/// Splits a product tree into its non-scalar factor chain (order preserved),
/// non-constant scalar factors with ±1 exponents, and a rational coefficient.
fn flatten_product(
    an: &mut Analysis,
    id: NodeId,
    sign: i32,
    chain: &mut Vec<NodeId>,
    scalars: &mut Vec<(NodeId, i32)>,
    coeff: &mut Rat,
) {
    match an.store.op(id).clone() {
        Op::Mul => {
            for c in an.store.children(id).to_vec() {
                if an.store.shape(c).is_scalar() {
                    push_scalar(an, c, sign, scalars, coeff);
                } else {
                    flatten_product(an, c, sign, chain, scalars, coeff);
                }
            }
        }
        Op::Div => {
            let ch = an.store.children(id).to_vec();
            flatten_product(an, ch[0], sign, chain, scalars, coeff);
            push_scalar(an, ch[1], -sign, scalars, coeff);
        }
        Op::Neg => {
            *coeff = -coeff.clone();
            flatten_product(an, an.store.children(id)[0], sign, chain, scalars, coeff);
        }
        Op::Transpose => {
            // Row vectors canonicalize with the transpose outermost, so a
            // negated factor hides as (-w)'; hoist the sign out.
            let inner = an.store.children(id)[0];
            if let Op::Neg = an.store.op(inner) {
                let w = an.store.children(inner)[0];
                *coeff = -coeff.clone();
                let t = an
                    .store
                    .mk(Op::Transpose, vec![w])
                    .expect("transposing a vector is always well-shaped");
                chain.push(t);
            } else {
                chain.push(id);
            }
        }
        _ => chain.push(id),
    }
}

fn push_scalar(
    an: &Analysis,
    id: NodeId,
    sign: i32,
    scalars: &mut Vec<(NodeId, i32)>,
    coeff: &mut Rat,
) {
    if let Op::Const(c) = an.store.op(id) {
        if sign >= 0 {
            *coeff *= c.clone();
        } else if !c.is_zero() {
            *coeff /= c.clone();
        } else {
            scalars.push((id, sign));
        }
    } else {
        scalars.push((id, sign));
    }
}

/// Exponent map of a product of scalar factors.
fn scalar_map(
    an: &Analysis,
    scalars: &[(NodeId, i32)],
    coeff: &mut Rat,
) -> BTreeMap<NodeId, Rat> {
    let mut map = BTreeMap::new();
    for (n, s) in scalars {
        scalar_into(an, *n, &Rat::from_integer(BigInt::from(*s)), &mut map, coeff);
    }
    map.retain(|_, e: &mut Rat| !e.is_zero());
    map
}

fn scalar_into(
    an: &Analysis,
    id: NodeId,
    e: &Rat,
    map: &mut BTreeMap<NodeId, Rat>,
    coeff: &mut Rat,
) {
    match an.store.op(id).clone() {
        Op::Mul => {
            for c in an.store.children(id).to_vec() {
                scalar_into(an, c, e, map, coeff);
            }
        }
        Op::Div => {
            let ch = an.store.children(id).to_vec();
            scalar_into(an, ch[0], e, map, coeff);
            scalar_into(an, ch[1], &-e.clone(), map, coeff);
        }
        Op::Pow => {
            let ch = an.store.children(id).to_vec();
            if let Op::Const(c) = an.store.op(ch[1]) {
                let ce = c.clone() * e;
                scalar_into(an, ch[0], &ce, map, coeff);
            } else {
                *map.entry(id).or_insert_with(Rat::zero) += e;
            }
        }
        Op::Const(c) => {
            if e.is_integer() && !c.is_zero() {
                *coeff *= rat_pow_int(&c, &e.to_integer());
            } else {
                *map.entry(id).or_insert_with(Rat::zero) += e;
            }
        }
        _ => {
            *map.entry(id).or_insert_with(Rat::zero) += e;
        }
    }
}

fn rat_pow_int(base: &Rat, e: &BigInt) -> Rat {
    let mag: u32 = e.magnitude().try_into().unwrap_or(u32::MAX);
    let p = Rat::new(base.numer().pow(mag), base.denom().pow(mag));
    if e.is_negative() {
        p.recip()
    } else {
        p
    }
}

// ----- elementwise factor multisets ---------------------------------------

/// Elementwise factor key; exponentials unify on their (scale-stripped)
/// argument so `exp(2x)` counts as `exp(x)²`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EKey {
    Node(NodeId),
    Exp(NodeId),
}

/// Multiset of elementwise factors with rational exponents, plus a scalar
/// coefficient. Scalar-shaped multipliers appear as `Node` keys too.
fn elem_map(an: &mut Analysis, id: NodeId) -> (Rat, BTreeMap<EKey, Rat>) {
    let mut map = BTreeMap::new();
    let mut coeff = Rat::one();
    elem_into(an, id, &Rat::one(), &mut map, &mut coeff);
    map.retain(|_, e| !e.is_zero());
    (coeff, map)
}

fn elem_into(
    an: &mut Analysis,
    id: NodeId,
    e: &Rat,
    map: &mut BTreeMap<EKey, Rat>,
    coeff: &mut Rat,
) {
    match an.store.op(id).clone() {
        Op::ElemMul | Op::Mul => {
            for c in an.store.children(id).to_vec() {
                elem_into(an, c, e, map, coeff);
            }
        }
        Op::ElemDiv | Op::Div => {
            let ch = an.store.children(id).to_vec();
            elem_into(an, ch[0], e, map, coeff);
            elem_into(an, ch[1], &-e.clone(), map, coeff);
        }
        Op::ElemPow | Op::Pow => {
            let ch = an.store.children(id).to_vec();
            if let Op::Const(c) = an.store.op(ch[1]) {
                let ce = c.clone() * e;
                elem_into(an, ch[0], &ce, map, coeff);
            } else {
                *map.entry(EKey::Node(id)).or_insert_with(Rat::zero) += e;
            }
        }
        Op::Broadcast => elem_into(an, an.store.children(id)[0], e, map, coeff),
        Op::Const(c) => {
            if e.is_integer() && !c.is_zero() {
                *coeff *= rat_pow_int(&c, &e.to_integer());
            } else {
                *map.entry(EKey::Node(id)).or_insert_with(Rat::zero) += e;
            }
        }
        Op::Apply(Func::Exp) => {
            let arg = an.store.children(id)[0];
            let (mult, core) = strip_scale(an, arg);
            *map.entry(EKey::Exp(core)).or_insert_with(Rat::zero) += e * mult;
        }
        Op::Apply(Func::Sqrt) => {
            let half = Rat::new(BigInt::from(1), BigInt::from(2));
            let he = e * half;
            elem_into(an, an.store.children(id)[0], &he, map, coeff);
        }
        Op::Neg => {
            if e.is_integer() {
                if e.to_integer().bit(0) {
                    *coeff = -coeff.clone();
                }
                elem_into(an, an.store.children(id)[0], e, map, coeff);
            } else {
                *map.entry(EKey::Node(id)).or_insert_with(Rat::zero) += e;
            }
        }
        _ => {
            *map.entry(EKey::Node(id)).or_insert_with(Rat::zero) += e;
        }
    }
}

fn strip_scale(an: &Analysis, id: NodeId) -> (Rat, NodeId) {
    match an.store.op(id).clone() {
        Op::Neg => {
            let (m, c) = strip_scale(an, an.store.children(id)[0]);
            (-m, c)
        }
        Op::Mul => {
            let ch = an.store.children(id).to_vec();
            if let Op::Const(c) = an.store.op(ch[0]) {
                (c.clone(), ch[1])
            } else {
                (Rat::one(), id)
            }
        }
        _ => (Rat::one(), id),
    }
}

fn add_maps(a: &BTreeMap<EKey, Rat>, b: &BTreeMap<EKey, Rat>) -> BTreeMap<EKey, Rat> {
    let mut out = a.clone();
    for (k, e) in b {
        *out.entry(k.clone()).or_insert_with(Rat::zero) += e;
    }
    out.retain(|_, e| !e.is_zero());
    out
}

fn sub_maps(a: &BTreeMap<EKey, Rat>, b: &BTreeMap<EKey, Rat>) -> BTreeMap<EKey, Rat> {
    let mut out = a.clone();
    for (k, e) in b {
        *out.entry(k.clone()).or_insert_with(Rat::zero) -= e;
    }
    out.retain(|_, e| !e.is_zero());
    out
}

/// Rebuilds a canonical vector expression from an elementwise factor map.
fn rebuild_elem(an: &mut Analysis, coeff: &Rat, map: &BTreeMap<EKey, Rat>, dim: &Dim) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (k, e) in map {
        let factor = match k {
            EKey::Node(n) => {
                if e.is_one() {
                    *n
                } else {
                    let c = an.store.mk_const(e.clone());
                    let op = if an.store.shape(*n).is_scalar() {
                        Op::Pow
                    } else {
                        Op::ElemPow
                    };
                    an.store.mk(op, vec![*n, c]).expect("pow of factor")
                }
            }
            EKey::Exp(core) => {
                let inner = if e.is_one() {
                    *core
                } else {
                    let c = an.store.mk_const(e.clone());
                    an.store.mk(Op::Mul, vec![c, *core]).expect("scaled arg")
                };
                an.store.mk(Op::Apply(Func::Exp), vec![inner]).expect("exp")
            }
        };
        acc = Some(match acc {
            None => factor,
            Some(a) => {
                let op = if an.store.shape(a).is_scalar()
                    && an.store.shape(factor).is_scalar()
                {
                    Op::Mul
                } else if an.store.shape(a).is_scalar() || an.store.shape(factor).is_scalar() {
                    Op::Mul
                } else {
                    Op::ElemMul
                };
                // Scalar * vector needs the scalar on the left.
                let (l, r) = if an.store.shape(a).is_scalar() && !an.store.shape(factor).is_scalar()
                {
                    (a, factor)
                } else if !an.store.shape(a).is_scalar() && an.store.shape(factor).is_scalar() {
                    (factor, a)
                } else {
                    (a, factor)
                };
                an.store.mk(op, vec![l, r]).expect("factor product")
            }
        });
    }
    let mut node = match acc {
        Some(n) => n,
        None => {
            let one = an.store.mk_int(1);
            an.store.mk_broadcast(one, dim.clone())
        }
    };
    if !coeff.is_one() {
        let c = an.store.mk_const(coeff.clone());
        node = an.store.mk(Op::Mul, vec![c, node]).expect("coefficient");
    }
    // Ensure the result is vector-shaped, then canonicalize so hash-consing
    // aligns it with nodes already in the DAG.
    if an.store.shape(node).is_scalar() {
        node = an.store.mk_broadcast(node, dim.clone());
    }
    an.resimplify(node)
}

// ----- additive chains ----------------------------------------------------
//
// The matchers above handle a single subtraction of a diagonal and an outer
// product. Hessians of products like g(sum(z))·log(sum(z)) canonicalize into
// longer additive chains whose negative summand is an outer product that is
// only dominated by a diagonal summand *jointly* with its scalar
// coefficients. The machinery below flattens such chains, bounds each
// summand, and discharges negative outer products against diagonal budget
// via the Cauchy-Schwarz bound u·uᵀ ⪯ sum(z)·diag(u⊙u⊘z).

type EMap = BTreeMap<EKey, Rat>;

/// Node behind an elementwise factor key.
fn ekey_node(an: &mut Analysis, k: &EKey) -> NodeId {
    match k {
        EKey::Node(n) => *n,
        EKey::Exp(core) => an
            .store
            .mk(Op::Apply(Func::Exp), vec![*core])
            .expect("exp of any operand"),
    }
}

/// Interval of `coeff · Π factorᵉ` by plain interval arithmetic.
fn monomial_interval(
    an: &mut Analysis,
    coeff: &Rat,
    map: &EMap,
) -> Result<Interval, PositivityError> {
    let mut iv = Interval::point(coeff.clone());
    for (k, e) in map {
        let n = ekey_node(an, k);
        let f = an.interval(n)?;
        iv = iv.mul(&f.pow(e));
    }
    Ok(iv)
}

/// Splits an elementwise factor map into its scalar-valued and vector-valued
/// factors. Vector factors whose entries are all the same scalar (sums of
/// broadcasts, for instance) count as that scalar.
fn split_by_shape(an: &mut Analysis, map: &EMap) -> (EMap, EMap) {
    let mut scalar = BTreeMap::new();
    let mut vector = BTreeMap::new();
    for (k, e) in map {
        let is_scalar = match k {
            EKey::Node(n) => an.store.shape(*n).is_scalar(),
            EKey::Exp(core) => an.store.shape(*core).is_scalar(),
        };
        if is_scalar {
            *scalar.entry(k.clone()).or_insert_with(Rat::zero) += e;
        } else if let EKey::Node(n) = k {
            match broadcast_content(an, *n) {
                Some(s) => {
                    let s = an.resimplify(s);
                    *scalar.entry(EKey::Node(s)).or_insert_with(Rat::zero) += e;
                }
                None => {
                    *vector.entry(k.clone()).or_insert_with(Rat::zero) += e;
                }
            }
        } else {
            *vector.entry(k.clone()).or_insert_with(Rat::zero) += e;
        }
    }
    (scalar, vector)
}

const EXPAND_LIMIT: usize = 64;

/// Distributes sum-shaped factors with small positive integer exponents,
/// yielding the monomial terms of `coeff · Π factorᵉ`. Factors that cannot
/// be expanded stay atomic in every term.
fn expand_terms(an: &mut Analysis, coeff: &Rat, map: &EMap) -> Vec<(Rat, EMap)> {
    let mut terms: Vec<(Rat, EMap)> = vec![(coeff.clone(), BTreeMap::new())];
    for (k, e) in map {
        let mut expanded: Option<Vec<(Rat, EMap)>> = None;
        if let EKey::Node(n) = k {
            let small = e.is_integer()
                && e.is_positive()
                && *e <= Rat::from_integer(BigInt::from(3));
            if small && matches!(an.store.op(*n), Op::Add | Op::Sub) {
                let mut leaves = Vec::new();
                add_leaves(an.store, *n, true, &mut leaves);
                let mut parts = Vec::new();
                for (sign, leaf) in leaves {
                    let (mut lc, lm) = elem_map(an, leaf);
                    if !sign {
                        lc = -lc;
                    }
                    parts.push((lc, lm));
                }
                let reps: usize = e.to_integer().try_into().unwrap_or(1);
                if parts.len().pow(reps as u32).saturating_mul(terms.len()) <= EXPAND_LIMIT {
                    let mut acc = terms.clone();
                    for _ in 0..reps {
                        let mut next = Vec::new();
                        for (tc, tm) in &acc {
                            for (lc, lm) in &parts {
                                next.push((tc * lc, add_maps(tm, lm)));
                            }
                        }
                        acc = next;
                    }
                    expanded = Some(acc);
                }
            }
        }
        match expanded {
            Some(v) => terms = v,
            None => {
                for (_, tm) in terms.iter_mut() {
                    *tm.entry(k.clone()).or_insert_with(Rat::zero) += e;
                }
            }
        }
    }
    let mut merged: Vec<(Rat, EMap)> = Vec::new();
    for (c, mut m) in terms {
        m.retain(|_, e| !e.is_zero());
        if let Some((mc, _)) = merged.iter_mut().find(|(_, mm)| *mm == m) {
            *mc += c;
        } else {
            merged.push((c, m));
        }
    }
    merged.retain(|(c, _)| !c.is_zero());
    merged
}

/// Proves `lc·Π lmᵉ ≥ rc·Π rmᵉ` by cancelling shared factor powers,
/// expanding both sides into monomial terms, and checking that every
/// residual term of the difference is nonnegative.
fn monomial_ge(
    an: &mut Analysis,
    lc: &Rat,
    lm: &EMap,
    rc: &Rat,
    rm: &EMap,
) -> Result<bool, PositivityError> {
    let mut lm = lm.clone();
    let mut rm = rm.clone();
    let shared: Vec<EKey> = lm.keys().filter(|k| rm.contains_key(k)).cloned().collect();
    for k in shared {
        let a = lm[&k].clone();
        let b = rm[&k].clone();
        let m = if a <= b { a } else { b };
        *lm.get_mut(&k).expect("shared key") -= &m;
        *rm.get_mut(&k).expect("shared key") -= &m;
    }
    lm.retain(|_, e| !e.is_zero());
    rm.retain(|_, e| !e.is_zero());
    let mut diff = expand_terms(an, lc, &lm);
    for (c, m) in expand_terms(an, rc, &rm) {
        if let Some((dc, _)) = diff.iter_mut().find(|(_, dm)| *dm == m) {
            *dc -= c;
        } else {
            diff.push((-c, m));
        }
    }
    signed_terms_nonneg(an, diff)
}

/// Whether a sum of expanded monomial terms is provably nonnegative: merges
/// identical factor maps, then requires every negative term to be dominated
/// by a distinct nonnegative term with magnitude ratio at most one.
fn signed_terms_nonneg(
    an: &mut Analysis,
    terms: Vec<(Rat, EMap)>,
) -> Result<bool, PositivityError> {
    let mut merged: Vec<(Rat, EMap)> = Vec::with_capacity(terms.len());
    for (c, m) in terms {
        if let Some((mc, _)) = merged.iter_mut().find(|(_, mm)| *mm == m) {
            *mc += c;
        } else {
            merged.push((c, m));
        }
    }
    let mut pos: Vec<(Rat, EMap)> = Vec::new();
    let mut negs: Vec<(Rat, EMap)> = Vec::new();
    for (c, m) in merged {
        if c.is_zero() {
            continue;
        }
        let iv = monomial_interval(an, &c, &m)?;
        if iv.subset_nonneg() {
            if c.is_positive() {
                pos.push((c, m));
            }
        } else if iv.subset_nonpos() && c.is_negative() {
            negs.push((-c, m));
        } else {
            return Ok(false);
        }
    }
    let mut used = vec![false; pos.len()];
    for (nc, nm) in &negs {
        let mut matched = false;
        for (i, (pc, pm)) in pos.iter().enumerate() {
            if used[i] {
                continue;
            }
            let rc = nc / pc;
            let rm = sub_maps(nm, pm);
            if magnitude_le_one(an, &rc, &rm)? {
                used[i] = true;
                matched = true;
                break;
            }
        }
        if !matched {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Relational entrywise bound `|f| ≤ bound · |g|`. Recognizes identical
/// factors, `|sinh v| ≤ cosh v`, and nonnegative `f` appearing as a summand
/// `c·f` of a nonnegative sum `g` (bound `1/c`).
fn entrywise_le_mag(
    an: &mut Analysis,
    f: &EKey,
    g: &EKey,
) -> Result<Option<Rat>, PositivityError> {
    if f == g {
        return Ok(Some(Rat::one()));
    }
    let fnode = ekey_node(an, f);
    let gnode = ekey_node(an, g);
    if let (Op::Apply(Func::Sinh), Op::Apply(Func::Cosh)) =
        (an.store.op(fnode).clone(), an.store.op(gnode).clone())
    {
        if an.store.children(fnode)[0] == an.store.children(gnode)[0] {
            return Ok(Some(Rat::one()));
        }
    }
    if matches!(an.store.op(gnode), Op::Add | Op::Sub)
        && an.interval(fnode)?.subset_nonneg()
    {
        let mut leaves = Vec::new();
        add_leaves(an.store, gnode, true, &mut leaves);
        let mut found: Option<Rat> = None;
        for (sign, leaf) in leaves {
            if !sign {
                return Ok(None);
            }
            if found.is_none() {
                let (lc, lmap) = elem_map(an, leaf);
                if lc.is_positive()
                    && lmap.len() == 1
                    && lmap.get(f) == Some(&Rat::one())
                {
                    found = Some(lc.recip());
                    continue;
                }
            }
            if !an.interval(leaf)?.subset_nonneg() {
                return Ok(None);
            }
        }
        return Ok(found);
    }
    Ok(None)
}

/// Proves `|coeff · Π factorᵉ| ≤ 1` by pairing numerator factors with
/// dominating denominator factors and bounding the leftovers.
fn magnitude_le_one(
    an: &mut Analysis,
    coeff: &Rat,
    map: &EMap,
) -> Result<bool, PositivityError> {
    let mut budget = coeff.abs();
    let pos: Vec<(EKey, Rat)> = map
        .iter()
        .filter(|(_, e)| e.is_positive())
        .map(|(k, e)| (k.clone(), e.clone()))
        .collect();
    let mut neg: Vec<(EKey, Rat)> = map
        .iter()
        .filter(|(_, e)| e.is_negative())
        .map(|(k, e)| (k.clone(), -e.clone()))
        .collect();
    for (k, mut a) in pos {
        for (g, cap) in neg.iter_mut() {
            if cap.is_zero() || a.is_zero() {
                continue;
            }
            if let Some(bound) = entrywise_le_mag(an, &k, g)? {
                let t = if a <= *cap { a.clone() } else { cap.clone() };
                if !bound.is_one() && !t.is_integer() {
                    continue;
                }
                a -= &t;
                *cap -= &t;
                if !bound.is_one() {
                    budget *= rat_pow_int(&bound, &t.to_integer());
                }
            }
        }
        if !a.is_zero() {
            let n = ekey_node(an, &k);
            if !an.interval(n)?.subset_of(&Interval::closed_int(-1, 1)) {
                return Ok(false);
            }
        }
    }
    for (g, cap) in neg {
        if cap.is_zero() {
            continue;
        }
        let n = ekey_node(an, &g);
        let iv = an.interval(n)?;
        if !(iv.subset_ge_one() || iv.neg().subset_ge_one()) {
            return Ok(false);
        }
    }
    Ok(budget <= Rat::one())
}

/// Sign refinement for a scalar or elementwise additive chain: negative
/// summands are discharged against positive summands whose ratio is bounded
/// by one in magnitude (`p + n = p·(1 + n/p) ≥ 0` when `|n/p| ≤ 1`).
pub fn chain_sign(an: &mut Analysis, v: NodeId) -> Result<Option<Interval>, PositivityError> {
    if !matches!(an.store.op(v), Op::Add | Op::Sub) {
        return Ok(None);
    }
    let mut leaves = Vec::new();
    add_leaves(an.store, v, true, &mut leaves);
    if leaves.len() < 2 {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(leaves.len());
    for (sign, leaf) in &leaves {
        let (mut c, m) = elem_map(an, *leaf);
        if !sign {
            c = -c;
        }
        terms.extend(expand_terms(an, &c, &m));
    }
    for flip in [false, true] {
        let oriented: Vec<(Rat, EMap)> = terms
            .iter()
            .map(|(c, m)| (if flip { -c } else { c.clone() }, m.clone()))
            .collect();
        if signed_terms_nonneg(an, oriented)? {
            let iv = if flip {
                Interval::nonpos()
            } else {
                Interval::nonneg()
            };
            return Ok(Some(iv));
        }
    }
    Ok(None)
}

/// Diagonal summand available as domination budget: `c·S·diag(Vw)` with
/// `c·S ≥ 0` (scalar monomial) and `Vw ≥ 0` entrywise.
struct DiagBudget {
    c: Rat,
    smap: EMap,
    vw: EMap,
    used: bool,
}

/// Negative outer-product summand `−mag·S·VuVuᵀ` with `mag·S ≥ 0`.
struct NegOuter {
    mag: Rat,
    smap: EMap,
    vu: EMap,
    u: NodeId,
}

/// Flattens an additive matrix expression into product leaves, distributing
/// scalar multipliers and divisors over the sums they scale.
fn collect_mat_terms(
    an: &mut Analysis,
    id: NodeId,
    sign: bool,
    pending: &mut Vec<(NodeId, i32)>,
    out: &mut Vec<(bool, Vec<(NodeId, i32)>, NodeId)>,
) {
    let node = an.store.node(id).clone();
    match node.op {
        Op::Add => {
            collect_mat_terms(an, node.children[0], sign, pending, out);
            collect_mat_terms(an, node.children[1], sign, pending, out);
        }
        Op::Sub => {
            collect_mat_terms(an, node.children[0], sign, pending, out);
            collect_mat_terms(an, node.children[1], !sign, pending, out);
        }
        Op::Neg => collect_mat_terms(an, node.children[0], !sign, pending, out),
        Op::Div if an.store.shape(node.children[1]).is_scalar() => {
            pending.push((node.children[1], -1));
            collect_mat_terms(an, node.children[0], sign, pending, out);
            pending.pop();
        }
        Op::Mul if an.store.shape(node.children[0]).is_scalar()
            && node.shape.is_matrix() =>
        {
            pending.push((node.children[0], 1));
            collect_mat_terms(an, node.children[1], sign, pending, out);
            pending.pop();
        }
        _ => out.push((sign, pending.clone(), id)),
    }
}

/// Matches additive chains of diagonal, outer-product, and independently
/// signed matrix summands where every negative outer product is dominated by
/// a diagonal summand.
fn additive_core(
    an: &mut Analysis,
    v: NodeId,
) -> Result<Option<TemplateMatch>, PositivityError> {
    if !matches!(an.store.op(v), Op::Add | Op::Sub) {
        return Ok(None);
    }
    let mut leaves = Vec::new();
    collect_mat_terms(an, v, true, &mut Vec::new(), &mut leaves);
    if leaves.len() < 2 {
        return Ok(None);
    }
    for flip in [false, true] {
        if let Some(m) = additive_oriented(an, &leaves, flip)? {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

fn additive_oriented(
    an: &mut Analysis,
    leaves: &[(bool, Vec<(NodeId, i32)>, NodeId)],
    flip: bool,
) -> Result<Option<TemplateMatch>, PositivityError> {
    let mut diags: Vec<DiagBudget> = Vec::new();
    let mut negs: Vec<NegOuter> = Vec::new();
    for (sign0, pending, leaf) in leaves {
        let sign = *sign0 != flip;
        let mut chain = Vec::new();
        let mut scalars = pending.clone();
        let mut coeff = Rat::one();
        flatten_product(an, *leaf, 1, &mut chain, &mut scalars, &mut coeff);
        if !sign {
            coeff = -coeff;
        }
        if coeff.is_zero() {
            continue;
        }
        let mut smap: EMap = BTreeMap::new();
        for (n, s) in &scalars {
            elem_into(an, *n, &Rat::from_integer(BigInt::from(*s)), &mut smap, &mut coeff);
        }
        smap.retain(|_, e| !e.is_zero());
        match chain.as_slice() {
            [d] if matches!(an.store.op(*d), Op::Diag) => {
                let w = an.store.children(*d)[0];
                let (cw, mw) = elem_map(an, w);
                let (ws, wv) = split_by_shape(an, &mw);
                let c = coeff * cw;
                let sm = add_maps(&smap, &ws);
                let siv = monomial_interval(an, &c, &sm)?;
                let wiv = monomial_interval(an, &Rat::one(), &wv)?;
                if siv.subset_nonneg() && wiv.subset_nonneg() {
                    diags.push(DiagBudget { c, smap: sm, vw: wv, used: false });
                } else if !siv.mul(&wiv).subset_nonneg() {
                    return Ok(None);
                }
            }
            [p, q] if matches!(an.store.op(*p), Op::Transpose)
                || matches!(an.store.op(*q), Op::Transpose) =>
            {
                let (col, row) = if let Op::Transpose = an.store.op(*q) {
                    (*p, an.store.children(*q)[0])
                } else {
                    (*q, an.store.children(*p)[0])
                };
                if !an.store.shape(col).is_vector() || !an.store.shape(row).is_vector() {
                    return Ok(None);
                }
                let (cp, mp) = elem_map(an, col);
                let (cq, mq) = elem_map(an, row);
                let (ps, pv) = split_by_shape(an, &mp);
                let (qs, qv) = split_by_shape(an, &mq);
                if pv != qv {
                    return Ok(None);
                }
                let c = coeff * cp * cq;
                let sm = add_maps(&smap, &add_maps(&ps, &qs));
                let siv = monomial_interval(an, &c, &sm)?;
                if siv.subset_nonneg() {
                    // Symmetric outer product with nonnegative scale: psd.
                } else if siv.subset_nonpos() && c.is_negative() {
                    negs.push(NegOuter { mag: -c, smap: sm, vu: pv, u: col });
                } else {
                    return Ok(None);
                }
            }
            [single] => {
                let iv = an.interval(*single)?;
                let siv = monomial_interval(an, &coeff, &smap)?;
                if !siv.mul(&iv).subset_nonneg() {
                    return Ok(None);
                }
            }
            _ => return Ok(None),
        }
    }
    if negs.is_empty() {
        return Ok(None);
    }
    let mut bindings = BTreeMap::new();
    for o in &negs {
        let mut matched = false;
        for d in diags.iter_mut() {
            if d.used {
                continue;
            }
            if let Some((y, z)) = dominates(an, d, o)? {
                d.used = true;
                matched = true;
                bindings.insert("y", y);
                bindings.insert("z", z);
                break;
            }
        }
        if !matched {
            return Ok(None);
        }
    }
    Ok(Some(TemplateMatch {
        template: TemplateId::GeneralizedVariance,
        bindings,
        prefactor: None,
        nsd: flip,
    }))
}

/// Discharges `mag·SR·VuVuᵀ ⪯ c·SD·diag(Vw)` via `VuVuᵀ ⪯
/// sum(z)·diag(Vu²⊘z)`, trying `z = Vu²⊘Vw` (consuming the diagonal
/// exactly) and any sum already present in the scalar factors. Returns the
/// template bindings `(y, z)` on success.
fn dominates(
    an: &mut Analysis,
    d: &DiagBudget,
    o: &NegOuter,
) -> Result<Option<(NodeId, NodeId)>, PositivityError> {
    let dim = match an.store.shape(o.u) {
        Shape::Vector(dim) => dim.clone(),
        _ => return Ok(None),
    };
    let uu = add_maps(&o.vu, &o.vu);
    // z = Vu²⊘Vw: the entrywise parts cancel and the comparison is scalar.
    let zmap = sub_maps(&uu, &d.vw);
    if monomial_interval(an, &Rat::one(), &zmap)?.subset_nonneg() {
        let z = rebuild_elem(an, &Rat::one(), &zmap, &dim);
        if let Ok(sum_raw) = an.store.mk(Op::Sum, vec![z]) {
            let s = an.resimplify(sum_raw);
            let mut rm = o.smap.clone();
            *rm.entry(EKey::Node(s)).or_insert_with(Rat::zero) += Rat::one();
            rm.retain(|_, e| !e.is_zero());
            let strong = monomial_ge(an, &d.c, &d.smap, &o.mag, &rm)?;
            let bounded = strong || {
                let rc = &o.mag / &d.c;
                let ratio = sub_maps(&rm, &d.smap);
                monomial_interval(an, &rc, &ratio)?.subset_nonneg()
                    && magnitude_le_one(an, &rc, &ratio)?
            };
            if bounded {
                let ymap = sub_maps(&d.vw, &o.vu);
                let y = rebuild_elem(an, &Rat::one(), &ymap, &dim);
                return Ok(Some((y, z)));
            }
        }
    }
    // z = an existing sum's operand: the leftover entrywise ratio
    // Vu²⊘(z⊙Vw) must be bounded alongside the scalar factors.
    let mut cands: Vec<NodeId> = Vec::new();
    for k in o.smap.keys().chain(d.smap.keys()) {
        if let EKey::Node(n) = k {
            if matches!(an.store.op(*n), Op::Sum) && !cands.contains(n) {
                cands.push(*n);
            }
        }
    }
    for s in cands {
        let vch = an.store.children(s)[0];
        if !an.interval(vch)?.subset_nonneg() {
            continue;
        }
        let (cv, mv) = elem_map(an, vch);
        if !cv.is_positive() {
            continue;
        }
        let (vs, vv) = split_by_shape(an, &mv);
        let mut map = sub_maps(&o.smap, &add_maps(&d.smap, &vs));
        *map.entry(EKey::Node(s)).or_insert_with(Rat::zero) += Rat::one();
        let vr = sub_maps(&sub_maps(&uu, &vv), &d.vw);
        let map = add_maps(&map, &vr);
        let rc = &o.mag / (&d.c * &cv);
        if monomial_interval(an, &rc, &map)?.subset_nonneg()
            && magnitude_le_one(an, &rc, &map)?
        {
            let ymap = sub_maps(&sub_maps(&o.vu, &vv), &vs);
            let y = rebuild_elem(an, &(Rat::one() / &cv), &ymap, &dim);
            return Ok(Some((y, vch)));
        }
    }
    Ok(None)
}

//! Numeric evaluation, feasible sampling, finite differences, and eigenvalue
//! checks.
//!
//! This is the brute-force counterpart to the symbolic pipeline: it evaluates
//! DAGs on concrete values, samples points that satisfy the declared
//! assumptions, cross-checks symbolic Hessians by central finite differences,
//! and measures the smallest eigenvalue of an evaluated Hessian. A negative
//! eigenvalue at a feasible point certifies NON-convexity; a nonnegative
//! sample result is only evidence. The module deliberately does not depend on
//! the positivity or template machinery, so disagreements localize bugs.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_traits::ToPrimitive;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ast::{Assumption, Func, Relation};
use crate::dag::{DagStore, NodeId, Op, SymbolTable};
use crate::shape::{Dim, Shape};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain violation: {0}")]
    DomainViolation(String),
    #[error("no value bound for symbol {0}")]
    MissingSymbol(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cannot resolve symbolic dimension {0}")]
    UnresolvedDimension(String),
    #[error("assumptions on {0} leave an empty domain")]
    EmptyDomain(String),
}

/// A concrete value for one symbol. Vectors are columns; row vectors appear
/// only as intermediate values and are carried as 1×n matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Matrix(m) if m.nrows() == 1 && m.ncols() == 1 => Some(m[(0, 0)]),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        match self {
            Value::Scalar(s) => DMatrix::from_element(1, 1, *s),
            Value::Vector(v) => DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
            Value::Matrix(m) => m.clone(),
        }
    }

    /// Largest absolute entry, used for relative tolerances.
    pub fn max_abs(&self) -> f64 {
        match self {
            Value::Scalar(s) => s.abs(),
            Value::Vector(v) => v.iter().fold(0.0, |a, x| a.max(x.abs())),
            Value::Matrix(m) => m.iter().fold(0.0, |a, x| a.max(x.abs())),
        }
    }
}

/// Concrete values for every symbol plus the concrete sizes assigned to
/// symbolic dimensions.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    pub values: HashMap<String, Value>,
    pub dims: HashMap<String, usize>,
}

impl Binding {
    pub fn resolve(&self, dim: &Dim) -> Result<usize, EvalError> {
        match dim {
            Dim::Fixed(n) => Ok(*n),
            Dim::Sym(s) => Ok(*self.dims.get(s).unwrap_or(&DEFAULT_DIM)),
            Dim::Unknown(_) => Ok(DEFAULT_DIM),
        }
    }

    pub fn set(&mut self, name: &str, value: Value) {
        self.values.insert(name.to_string(), value);
    }
}

pub const DEFAULT_DIM: usize = 4;

/// Sampling configuration: number of trials, dimension assignment for
/// symbolic sizes, RNG seed, and the margin kept from open domain boundaries.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub trials: usize,
    pub dims: HashMap<String, usize>,
    pub seed: u64,
    pub margin: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            trials: 100,
            dims: HashMap::new(),
            seed: 0,
            margin: 1e-3,
        }
    }
}

/// Evaluates the DAG rooted at `root` on a binding.
pub fn evaluate(store: &DagStore, root: NodeId, binding: &Binding) -> Result<Value, EvalError> {
    let mut memo: HashMap<NodeId, Value> = HashMap::new();
    eval_rec(store, root, binding, &mut memo)
}

fn eval_rec(
    store: &DagStore,
    id: NodeId,
    binding: &Binding,
    memo: &mut HashMap<NodeId, Value>,
) -> Result<Value, EvalError> {
    if let Some(v) = memo.get(&id) {
        return Ok(v.clone());
    }
    let node = store.node(id);
    let op = node.op.clone();
    let shape = node.shape.clone();
    let children = node.children.clone();
    let mut child_vals = Vec::with_capacity(children.len());
    for &c in &children {
        child_vals.push(eval_rec(store, c, binding, memo)?);
    }
    let out = apply_op(&op, &shape, &child_vals, binding)?;
    memo.insert(id, out.clone());
    Ok(out)
}

fn apply_op(
    op: &Op,
    shape: &Shape,
    vals: &[Value],
    binding: &Binding,
) -> Result<Value, EvalError> {
    match op {
        Op::Const(c) => Ok(Value::Scalar(
            c.to_f64()
                .ok_or_else(|| EvalError::DomainViolation("constant overflows f64".into()))?,
        )),
        Op::Var(name) => binding
            .values
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::MissingSymbol(name.clone())),
        Op::Broadcast => {
            let s = expect_scalar(&vals[0])?;
            let n = match shape {
                Shape::Vector(d) => binding.resolve(d)?,
                _ => return Err(EvalError::DimensionMismatch("vector(c) must be a vector".into())),
            };
            Ok(Value::Vector(DVector::from_element(n, s)))
        }
        Op::Add => zip_entrywise(&vals[0], &vals[1], |a, b| Ok(a + b)),
        Op::Sub => zip_entrywise(&vals[0], &vals[1], |a, b| Ok(a - b)),
        Op::Neg => map_entrywise(&vals[0], |a| Ok(-a)),
        Op::Mul => mul(&vals[0], &vals[1]),
        Op::Div => {
            let d = expect_scalar(&vals[1])?;
            if d == 0.0 {
                return Err(EvalError::DomainViolation("division by zero".into()));
            }
            map_entrywise(&vals[0], |a| Ok(a / d))
        }
        Op::Pow => {
            let b = expect_scalar(&vals[0])?;
            let e = expect_scalar(&vals[1])?;
            Ok(Value::Scalar(checked_pow(b, e)?))
        }
        Op::ElemMul => zip_entrywise(&vals[0], &vals[1], |a, b| Ok(a * b)),
        Op::ElemDiv => zip_entrywise(&vals[0], &vals[1], |a, b| {
            if b == 0.0 {
                Err(EvalError::DomainViolation("elementwise division by zero".into()))
            } else {
                Ok(a / b)
            }
        }),
        Op::ElemPow => {
            let e = expect_scalar(&vals[1])?;
            map_entrywise(&vals[0], |a| checked_pow(a, e))
        }
        Op::Transpose => Ok(Value::Matrix(vals[0].as_matrix().transpose())),
        Op::Apply(f) => map_entrywise(&vals[0], |a| apply_func(*f, a)),
        Op::Sum => {
            let m = vals[0].as_matrix();
            Ok(Value::Scalar(m.iter().sum()))
        }
        Op::Diag => {
            let m = vals[0].as_matrix();
            if m.ncols() != 1 {
                return Err(EvalError::DimensionMismatch("diag expects a vector".into()));
            }
            Ok(Value::Matrix(DMatrix::from_diagonal(&m.column(0).into_owned())))
        }
        Op::Norm2 => {
            let m = vals[0].as_matrix();
            Ok(Value::Scalar(m.iter().map(|x| x * x).sum::<f64>().sqrt()))
        }
    }
}

fn expect_scalar(v: &Value) -> Result<f64, EvalError> {
    v.as_scalar()
        .ok_or_else(|| EvalError::DimensionMismatch("expected a scalar".into()))
}

fn checked_pow(base: f64, exp: f64) -> Result<f64, EvalError> {
    if base == 0.0 && exp < 0.0 {
        return Err(EvalError::DomainViolation("0 raised to a negative power".into()));
    }
    if base < 0.0 && exp.fract() != 0.0 {
        return Err(EvalError::DomainViolation(format!(
            "negative base {base} with fractional exponent {exp}"
        )));
    }
    let out = if exp.fract() == 0.0 && exp.abs() < 1e15 {
        base.powi(exp as i32)
    } else {
        base.powf(exp)
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(EvalError::DomainViolation(format!("{base}^{exp} is not finite")))
    }
}

fn apply_func(f: Func, x: f64) -> Result<f64, EvalError> {
    let out = match f {
        Func::Exp => x.exp(),
        Func::Log => {
            if x <= 0.0 {
                return Err(EvalError::DomainViolation(format!("log of {x}")));
            }
            x.ln()
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err(EvalError::DomainViolation(format!("sqrt of {x}")));
            }
            x.sqrt()
        }
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tan => x.tan(),
        Func::Sinh => x.sinh(),
        Func::Cosh => x.cosh(),
        Func::Tanh => x.tanh(),
        Func::Arcsin => {
            if !(-1.0..=1.0).contains(&x) {
                return Err(EvalError::DomainViolation(format!("arcsin of {x}")));
            }
            x.asin()
        }
        Func::Arccos => {
            if !(-1.0..=1.0).contains(&x) {
                return Err(EvalError::DomainViolation(format!("arccos of {x}")));
            }
            x.acos()
        }
        Func::Arctan => x.atan(),
        Func::Abs => x.abs(),
        Func::Sign => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Func::Sum | Func::Diag | Func::Norm2 | Func::Vector => {
            return Err(EvalError::DimensionMismatch(format!(
                "{} is not an elementwise function",
                f.name()
            )))
        }
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(EvalError::DomainViolation(format!("{}({x}) is not finite", f.name())))
    }
}

fn map_entrywise(
    v: &Value,
    f: impl Fn(f64) -> Result<f64, EvalError>,
) -> Result<Value, EvalError> {
    Ok(match v {
        Value::Scalar(s) => Value::Scalar(f(*s)?),
        Value::Vector(x) => {
            let mut out = x.clone();
            for e in out.iter_mut() {
                *e = f(*e)?;
            }
            Value::Vector(out)
        }
        Value::Matrix(m) => {
            let mut out = m.clone();
            for e in out.iter_mut() {
                *e = f(*e)?;
            }
            Value::Matrix(out)
        }
    })
}

fn zip_entrywise(
    a: &Value,
    b: &Value,
    f: impl Fn(f64, f64) -> Result<f64, EvalError>,
) -> Result<Value, EvalError> {
    // Scalars broadcast against any operand.
    if let Some(s) = a.as_scalar() {
        if matches!(a, Value::Scalar(_)) {
            return map_entrywise(b, |x| f(s, x));
        }
    }
    if let Some(s) = b.as_scalar() {
        if matches!(b, Value::Scalar(_)) {
            return map_entrywise(a, |x| f(x, s));
        }
    }
    let (ma, mb) = (a.as_matrix(), b.as_matrix());
    if ma.shape() != mb.shape() {
        return Err(EvalError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            ma.shape(),
            mb.shape()
        )));
    }
    let mut out = ma.clone();
    for (o, (x, y)) in out.iter_mut().zip(ma.iter().zip(mb.iter())) {
        *o = f(*x, *y)?;
    }
    Ok(reshape(out, a))
}

/// Keep the vector representation when both operands were vectors.
fn reshape(m: DMatrix<f64>, like: &Value) -> Value {
    if matches!(like, Value::Vector(_)) && m.ncols() == 1 {
        Value::Vector(m.column(0).into_owned())
    } else {
        Value::Matrix(m)
    }
}

fn mul(a: &Value, b: &Value) -> Result<Value, EvalError> {
    if let Value::Scalar(s) = a {
        return map_entrywise(b, |x| Ok(s * x));
    }
    if let Value::Scalar(s) = b {
        return map_entrywise(a, |x| Ok(x * s));
    }
    let (ma, mb) = (a.as_matrix(), b.as_matrix());
    if ma.ncols() != mb.nrows() {
        return Err(EvalError::DimensionMismatch(format!(
            "cannot multiply {:?} by {:?}",
            ma.shape(),
            mb.shape()
        )));
    }
    let out = ma * mb;
    if out.nrows() == 1 && out.ncols() == 1 {
        Ok(Value::Scalar(out[(0, 0)]))
    } else if out.ncols() == 1 {
        Ok(Value::Vector(out.column(0).into_owned()))
    } else {
        Ok(Value::Matrix(out))
    }
}

// ----- sampling -----------------------------------------------------------

/// The [lo, hi] box a symbol's entries are drawn from: the intersection of
/// [-3, 3] with the symbol's assumption interval, strict bounds pushed inward
/// by the margin.
fn sample_range(
    name: &str,
    assumptions: &[Assumption],
    margin: f64,
) -> Result<(f64, f64), EvalError> {
    let mut lo = -3.0f64;
    let mut hi = 3.0f64;
    for a in assumptions.iter().filter(|a| a.subject == name) {
        let b = a.bound.to_f64().unwrap_or(0.0);
        match a.relation {
            Relation::Gt => lo = lo.max(b + margin),
            Relation::Ge => lo = lo.max(b),
            Relation::Lt => hi = hi.min(b - margin),
            Relation::Le => hi = hi.min(b),
        }
    }
    if lo > hi {
        return Err(EvalError::EmptyDomain(name.to_string()));
    }
    Ok((lo, hi))
}

/// Draws one feasible binding for all declared symbols; deterministic given
/// (seed, trial).
pub fn sample_feasible(
    symbols: &SymbolTable,
    assumptions: &[Assumption],
    config: &SampleConfig,
    trial: usize,
) -> Result<Binding, EvalError> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_add((trial as u64).wrapping_mul(0x9E3779B97F4A7C15)));
    let mut binding = Binding {
        values: HashMap::new(),
        dims: config.dims.clone(),
    };
    // Stable iteration order: sort names.
    let mut names: Vec<&String> = symbols.names().collect();
    names.sort();
    // Make sure every symbolic dim is pinned so evaluation is consistent.
    for name in &names {
        let info = symbols.get(name).unwrap();
        for d in shape_dims(&info.shape) {
            if let Dim::Sym(s) = d {
                binding.dims.entry(s.clone()).or_insert(DEFAULT_DIM);
            }
        }
    }
    for name in names {
        let info = symbols.get(name).unwrap();
        let (lo, hi) = sample_range(name, assumptions, config.margin)?;
        let dist = Uniform::new_inclusive(lo, hi);
        let draw = |rng: &mut ChaCha8Rng| dist.sample(rng);
        let value = match &info.shape {
            Shape::Scalar => Value::Scalar(draw(&mut rng)),
            Shape::Vector(d) | Shape::RowVector(d) => {
                let n = binding.resolve(d)?;
                Value::Vector(DVector::from_fn(n, |_, _| draw(&mut rng)))
            }
            Shape::Matrix(r, c) => {
                let (nr, nc) = (binding.resolve(r)?, binding.resolve(c)?);
                if info.psd {
                    if nr != nc {
                        return Err(EvalError::DimensionMismatch(format!(
                            "psd symbol {name} must be square"
                        )));
                    }
                    let b = DMatrix::from_fn(nr, nc, |_, _| draw(&mut rng));
                    Value::Matrix(b.transpose() * b)
                } else {
                    Value::Matrix(DMatrix::from_fn(nr, nc, |_, _| draw(&mut rng)))
                }
            }
        };
        binding.set(name, value);
    }
    Ok(binding)
}

fn shape_dims(shape: &Shape) -> Vec<&Dim> {
    match shape {
        Shape::Scalar => vec![],
        Shape::Vector(d) | Shape::RowVector(d) => vec![d],
        Shape::Matrix(r, c) => vec![r, c],
    }
}

// ----- finite differences -------------------------------------------------

/// Central-difference Hessian of the scalar expression `root` with respect to
/// `wrt`, symmetrized as (H + Hᵀ)/2. The step for coordinate i is
/// `1e-4 * (1 + |x_i|)`: second differences divide by h², so a smaller step
/// would let f64 cancellation (~eps·|f|/h²) exceed the 1e-6 absolute accuracy
/// we target on quadratics.
pub fn finite_diff_hessian(
    store: &DagStore,
    root: NodeId,
    wrt: &str,
    binding: &Binding,
) -> Result<DMatrix<f64>, EvalError> {
    let base = binding
        .values
        .get(wrt)
        .ok_or_else(|| EvalError::MissingSymbol(wrt.to_string()))?
        .clone();
    let x: Vec<f64> = match &base {
        Value::Scalar(s) => vec![*s],
        Value::Vector(v) => v.iter().copied().collect(),
        Value::Matrix(_) => {
            return Err(EvalError::DimensionMismatch(
                "cannot differentiate with respect to a matrix".into(),
            ))
        }
    };
    let n = x.len();
    let scalar_var = matches!(base, Value::Scalar(_));
    let eval_at = |pt: &[f64]| -> Result<f64, EvalError> {
        let mut b = binding.clone();
        let v = if scalar_var {
            Value::Scalar(pt[0])
        } else {
            Value::Vector(DVector::from_column_slice(pt))
        };
        b.set(wrt, v);
        expect_scalar(&evaluate(store, root, &b)?)
    };
    let h: Vec<f64> = x.iter().map(|xi| 1e-4 * (1.0 + xi.abs())).collect();
    let f0 = eval_at(&x)?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                let mut p = x.clone();
                p[i] += h[i];
                let fp = eval_at(&p)?;
                p[i] = x[i] - h[i];
                let fm = eval_at(&p)?;
                (fp - 2.0 * f0 + fm) / (h[i] * h[i])
            } else {
                let mut p = x.clone();
                p[i] += h[i];
                p[j] += h[j];
                let fpp = eval_at(&p)?;
                p[j] = x[j] - h[j];
                let fpm = eval_at(&p)?;
                p[i] = x[i] - h[i];
                let fmm = eval_at(&p)?;
                p[j] = x[j] + h[j];
                let fmp = eval_at(&p)?;
                (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

// ----- eigenvalue checks --------------------------------------------------

/// Smallest eigenvalue of the symmetrized evaluated Hessian. A negative
/// result at a feasible point certifies non-convexity there.
pub fn min_quadratic_form(
    store: &DagStore,
    hessian: NodeId,
    binding: &Binding,
) -> Result<f64, EvalError> {
    let v = evaluate(store, hessian, binding)?;
    match v {
        Value::Scalar(s) => Ok(s),
        other => {
            let m = other.as_matrix();
            if m.nrows() != m.ncols() {
                return Err(EvalError::DimensionMismatch(
                    "Hessian evaluated to a non-square matrix".into(),
                ));
            }
            let sym = (&m + m.transpose()) * 0.5;
            let eig = sym.symmetric_eigen();
            Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
        }
    }
}

/// A domain restriction whose subject is an expression rather than a symbol
/// (symbol restrictions are enforced directly while sampling). Checked
/// entrywise on vector-valued subjects.
#[derive(Debug, Clone)]
pub struct DomainConstraint {
    pub node: NodeId,
    pub relation: Relation,
    pub bound: f64,
}

/// Lowers every expression-subject assumption into an evaluable constraint.
pub fn lower_constraints(
    store: &mut DagStore,
    symbols: &SymbolTable,
    assumptions: &[Assumption],
) -> Vec<DomainConstraint> {
    let mut out = Vec::new();
    for a in assumptions {
        if crate::positivity::subject_is_symbol(&a.subject) {
            continue;
        }
        let Ok(ast) = crate::parser::parse(&a.subject) else {
            continue;
        };
        let Ok(node) = crate::dag::lower(store, &ast, symbols) else {
            continue;
        };
        let bound = a.bound.to_f64().unwrap_or(0.0);
        out.push(DomainConstraint {
            node,
            relation: a.relation,
            bound,
        });
    }
    out
}

/// True when the binding satisfies every constraint (entrywise).
pub fn constraints_hold(
    store: &DagStore,
    constraints: &[DomainConstraint],
    binding: &Binding,
) -> bool {
    constraints.iter().all(|c| {
        let Ok(value) = evaluate(store, c.node, binding) else {
            return false;
        };
        let entries: Vec<f64> = match value {
            Value::Scalar(s) => vec![s],
            Value::Vector(v) => v.iter().copied().collect(),
            Value::Matrix(m) => m.iter().copied().collect(),
        };
        entries.iter().all(|&v| match c.relation {
            Relation::Gt => v > c.bound,
            Relation::Ge => v >= c.bound,
            Relation::Lt => v < c.bound,
            Relation::Le => v <= c.bound,
        })
    })
}

/// A feasible point where the Hessian has a negative eigenvalue.
#[derive(Debug, Clone)]
pub struct Witness {
    pub binding: Binding,
    pub eigenvalue: f64,
}

/// Searches for a non-convexity witness: a few deterministic probe points
/// (constant vectors at ±1, ±2, 1/2) first, then `config.trials` random
/// feasible samples.
pub fn falsify(
    store: &DagStore,
    hessian: NodeId,
    symbols: &SymbolTable,
    assumptions: &[Assumption],
    constraints: &[DomainConstraint],
    config: &SampleConfig,
) -> Result<Option<Witness>, EvalError> {
    let tol = |m: f64| -1e-8 * (1.0 + m);
    for probe in [-1.0, 1.0, -2.0, 2.0, 0.5] {
        if let Some(binding) = probe_binding(symbols, assumptions, config, probe)? {
            if !constraints_hold(store, constraints, &binding) {
                continue;
            }
            if let Ok(min) = min_quadratic_form(store, hessian, &binding) {
                let scale = evaluate(store, hessian, &binding)
                    .map(|v| v.max_abs())
                    .unwrap_or(1.0);
                if min < tol(scale) {
                    return Ok(Some(Witness { binding, eigenvalue: min }));
                }
            }
        }
    }
    for trial in 0..config.trials {
        let binding = sample_feasible(symbols, assumptions, config, trial)?;
        if !constraints_hold(store, constraints, &binding) {
            continue;
        }
        if let Ok(min) = min_quadratic_form(store, hessian, &binding) {
            let scale = evaluate(store, hessian, &binding)
                .map(|v| v.max_abs())
                .unwrap_or(1.0);
            if min < tol(scale) {
                return Ok(Some(Witness { binding, eigenvalue: min }));
            }
        }
    }
    Ok(None)
}

/// A binding with every entry of every symbol set to `v`, or `None` if `v`
/// violates some assumption. Psd matrix symbols get `v²·I` so they stay psd.
fn probe_binding(
    symbols: &SymbolTable,
    assumptions: &[Assumption],
    config: &SampleConfig,
    v: f64,
) -> Result<Option<Binding>, EvalError> {
    let mut binding = Binding {
        values: HashMap::new(),
        dims: config.dims.clone(),
    };
    let mut names: Vec<&String> = symbols.names().collect();
    names.sort();
    for name in &names {
        let info = symbols.get(name).unwrap();
        for d in shape_dims(&info.shape) {
            if let Dim::Sym(s) = d {
                binding.dims.entry(s.clone()).or_insert(DEFAULT_DIM);
            }
        }
    }
    for name in names {
        let info = symbols.get(name).unwrap();
        let (lo, hi) = sample_range(name, assumptions, config.margin)?;
        if v < lo || v > hi {
            return Ok(None);
        }
        let value = match &info.shape {
            Shape::Scalar => Value::Scalar(v),
            Shape::Vector(d) | Shape::RowVector(d) => {
                let n = binding.resolve(d)?;
                Value::Vector(DVector::from_element(n, v))
            }
            Shape::Matrix(r, c) => {
                let (nr, nc) = (binding.resolve(r)?, binding.resolve(c)?);
                if info.psd {
                    Value::Matrix(DMatrix::identity(nr, nc) * (v * v))
                } else {
                    Value::Matrix(DMatrix::from_element(nr, nc, v))
                }
            }
        };
        binding.set(name, value);
    }
    Ok(Some(binding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::hessian;
    use crate::dag::{lower, DagStore, Role};
    use crate::parser::{parse, parse_assumptions};
    use crate::simplify::{simplify, SimplifyCtx};

    fn lower_expr(store: &mut DagStore, syms: &SymbolTable, text: &str) -> NodeId {
        lower(store, &parse(text).unwrap(), syms).unwrap()
    }

    fn scalar_syms() -> SymbolTable {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        s
    }

    #[test]
    fn entropy_at_one_is_zero() {
        let mut store = DagStore::new();
        let syms = scalar_syms();
        let f = lower_expr(&mut store, &syms, "x*log(x)");
        let mut b = Binding::default();
        b.set("x", Value::Scalar(1.0));
        assert_eq!(evaluate(&store, f, &b).unwrap(), Value::Scalar(0.0));
    }

    #[test]
    fn sum_exp_at_zero_vector() {
        let mut store = DagStore::new();
        let mut syms = SymbolTable::new();
        syms.declare("x", Shape::Vector(Dim::Fixed(2)), Role::Variable);
        let f = lower_expr(&mut store, &syms, "sum(exp(x))");
        let mut b = Binding::default();
        b.set("x", Value::Vector(DVector::zeros(2)));
        assert_eq!(evaluate(&store, f, &b).unwrap(), Value::Scalar(2.0));
    }

    #[test]
    fn gram_matrix_at_identity() {
        let mut store = DagStore::new();
        let mut syms = SymbolTable::new();
        syms.declare("X", Shape::Matrix(Dim::Fixed(2), Dim::Fixed(2)), Role::Parameter);
        let f = lower_expr(&mut store, &syms, "2*X'*X");
        let mut b = Binding::default();
        b.set("X", Value::Matrix(DMatrix::identity(2, 2)));
        let out = evaluate(&store, f, &b).unwrap().as_matrix();
        assert_eq!(out, DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut store = DagStore::new();
        let syms = scalar_syms();
        let f = lower_expr(&mut store, &syms, "log(x)");
        let mut b = Binding::default();
        b.set("x", Value::Scalar(-1.0));
        assert!(matches!(
            evaluate(&store, f, &b),
            Err(EvalError::DomainViolation(_))
        ));
    }

    #[test]
    fn sampling_respects_bounds() {
        let syms = scalar_syms();
        let config = SampleConfig::default();
        let pos = parse_assumptions("x>0").unwrap();
        for t in 0..50 {
            let b = sample_feasible(&syms, &pos, &config, t).unwrap();
            let x = b.values["x"].as_scalar().unwrap();
            assert!(x >= config.margin, "x = {x}");
            assert!(x <= 3.0);
        }
        let ge1 = parse_assumptions("x>=1").unwrap();
        for t in 0..50 {
            let b = sample_feasible(&syms, &ge1, &config, t).unwrap();
            let x = b.values["x"].as_scalar().unwrap();
            assert!((1.0..=3.0).contains(&x), "x = {x}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut syms = scalar_syms();
        syms.declare("y", Shape::Vector(Dim::Sym("n".into())), Role::Parameter);
        let config = SampleConfig::default();
        let a = sample_feasible(&syms, &[], &config, 7).unwrap();
        let b = sample_feasible(&syms, &[], &config, 7).unwrap();
        assert_eq!(a.values["x"], b.values["x"]);
        assert_eq!(a.values["y"], b.values["y"]);
    }

    #[test]
    fn empty_domain_detected() {
        let syms = scalar_syms();
        let config = SampleConfig::default();
        let contradictory = parse_assumptions("x>2, x<1").unwrap();
        assert!(matches!(
            sample_feasible(&syms, &contradictory, &config, 0),
            Err(EvalError::EmptyDomain(_))
        ));
    }

    #[test]
    fn finite_diff_of_quadratic_is_two_i() {
        let mut store = DagStore::new();
        let mut syms = SymbolTable::new();
        syms.declare("x", Shape::Vector(Dim::Fixed(3)), Role::Variable);
        let f = lower_expr(&mut store, &syms, "x'*x");
        let mut b = Binding::default();
        b.set("x", Value::Vector(DVector::from_vec(vec![0.3, -1.2, 2.0])));
        let h = finite_diff_hessian(&store, f, "x", &b).unwrap();
        let expected = DMatrix::identity(3, 3) * 2.0;
        assert!((h - expected).amax() < 1e-6);
    }

    #[test]
    fn finite_diff_entropy_at_two() {
        let mut store = DagStore::new();
        let syms = scalar_syms();
        let f = lower_expr(&mut store, &syms, "x*log(x)");
        let mut b = Binding::default();
        b.set("x", Value::Scalar(2.0));
        let h = finite_diff_hessian(&store, f, "x", &b).unwrap();
        assert!((h[(0, 0)] - 0.5).abs() < 1e-5, "got {}", h[(0, 0)]);
    }

    #[test]
    fn min_eig_of_positive_diagonal() {
        let mut store = DagStore::new();
        let mut syms = SymbolTable::new();
        syms.declare("d", Shape::Vector(Dim::Fixed(3)), Role::Parameter);
        let f = lower_expr(&mut store, &syms, "diag(d)");
        let mut b = Binding::default();
        b.set("d", Value::Vector(DVector::from_vec(vec![2.0, 0.5, 7.0])));
        let min = min_quadratic_form(&store, f, &b).unwrap();
        assert!((min - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logistic_hessian_at_zero_is_quarter() {
        let mut store = DagStore::new();
        let syms = scalar_syms();
        let ctx = SimplifyCtx::default();
        let f = lower_expr(&mut store, &syms, "log(1+exp(x))");
        let res = hessian(&mut store, f, "x", &Shape::Scalar, &ctx).unwrap();
        let mut b = Binding::default();
        b.set("x", Value::Scalar(0.0));
        let min = min_quadratic_form(&store, res.hessian, &b).unwrap();
        assert!((min - 0.25).abs() < 1e-12, "got {min}");
    }

    #[test]
    fn cubic_yields_witness_at_minus_one() {
        let mut store = DagStore::new();
        let syms = scalar_syms();
        let ctx = SimplifyCtx::default();
        let f = lower_expr(&mut store, &syms, "x^3");
        let res = hessian(&mut store, f, "x", &Shape::Scalar, &ctx).unwrap();
        let config = SampleConfig::default();
        let w = falsify(&store, res.hessian, &syms, &[], &[], &config)
            .unwrap()
            .expect("x^3 is not convex on the reals");
        assert_eq!(w.binding.values["x"].as_scalar().unwrap(), -1.0);
        assert!((w.eigenvalue + 6.0).abs() < 1e-12, "got {}", w.eigenvalue);
    }

    #[test]
    fn simplified_and_raw_agree_numerically() {
        let mut store = DagStore::new();
        let mut syms = SymbolTable::new();
        syms.declare("x", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        let ctx = SimplifyCtx::default();
        let f = lower_expr(&mut store, &syms, "log(sum(exp(x)))+sum(x.*x)-sum(x)/3");
        let s = simplify(&mut store, f, &ctx);
        let config = SampleConfig::default();
        for t in 0..20 {
            let b = sample_feasible(&syms, &[], &config, t).unwrap();
            let a = evaluate(&store, f, &b).unwrap().as_scalar().unwrap();
            let c = evaluate(&store, s, &b).unwrap().as_scalar().unwrap();
            assert!((a - c).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {c}");
        }
    }
}

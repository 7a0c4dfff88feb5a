//! Shape inference and the hash-consed expression DAG.
//!
//! `infer_shapes` turns an untyped [`Ast`] into a shape-annotated tree,
//! unifying the free dimension introduced by `vector(c)` with its context.
//! `normalize` then interns the tree into a [`DagStore`] where structurally
//! equal subtrees share a single node, so structural equality of
//! subexpressions is id equality.

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use thiserror::Error;

use crate::ast::{Ast, BinaryOp, Func, UnaryOp};
use crate::shape::{Dim, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Operator kinds of DAG nodes. Elementwise function application keeps the
/// surface function name; `Broadcast` is `vector(c)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Const(BigRational),
    Var(String),
    Add,
    Sub,
    Neg,
    Mul,
    Div,
    Pow,
    ElemMul,
    ElemDiv,
    ElemPow,
    Transpose,
    Apply(Func),
    Sum,
    Diag,
    Norm2,
    Broadcast,
}

impl Op {
    pub fn label(&self) -> String {
        match self {
            Op::Const(c) => crate::ast::render_rational(c),
            Op::Var(v) => v.clone(),
            Op::Add => "+".into(),
            Op::Sub => "-".into(),
            Op::Neg => "neg".into(),
            Op::Mul => "*".into(),
            Op::Div => "/".into(),
            Op::Pow => "^".into(),
            Op::ElemMul => ".*".into(),
            Op::ElemDiv => "./".into(),
            Op::ElemPow => ".^".into(),
            Op::Transpose => "'".into(),
            Op::Apply(f) => f.name().into(),
            Op::Sum => "sum".into(),
            Op::Diag => "diag".into(),
            Op::Norm2 => "norm2".into(),
            Op::Broadcast => "vector".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub children: Vec<NodeId>,
    pub shape: Shape,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("dimension mismatch: {left} vs {right} in {context}")]
    DimMismatch {
        left: String,
        right: String,
        context: String,
    },
    #[error("operator {op} not defined for shapes {left} and {right}")]
    BadOperands { op: String, left: String, right: String },
    #[error("operator {op} not defined for shape {operand}")]
    BadOperand { op: String, operand: String },
    #[error("could not determine the dimension of vector(c) from context")]
    UnresolvedDim,
    #[error("matrix-valued optimization variables are not supported")]
    MatrixVariable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// The (single) optimization variable of a certification run.
    Variable,
    /// Symbolic data such as `X`, `y`, `A`, `p`.
    Parameter,
}

#[derive(Debug, Clone)]
pub struct SymbolInfo {
    pub shape: Shape,
    pub role: Role,
    /// Matrix parameters may be declared positive semidefinite up front
    /// (CVX's `quad_form` convention).
    pub psd: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    entries: HashMap<String, SymbolInfo>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, shape: Shape, role: Role) {
        self.entries.insert(
            name.to_string(),
            SymbolInfo { shape, role, psd: false },
        );
    }

    pub fn declare_psd(&mut self, name: &str) {
        if let Some(info) = self.entries.get_mut(name) {
            info.psd = true;
        }
    }

    pub fn get(&self, name: &str) -> Option<&SymbolInfo> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// A shape-annotated expression tree, the output of [`infer_shapes`].
#[derive(Debug, Clone)]
pub struct ShapedTree {
    pub op: Op,
    pub children: Vec<ShapedTree>,
    pub shape: Shape,
}

#[derive(Default)]
struct Unifier {
    next: u32,
    subst: HashMap<u32, Dim>,
}

impl Unifier {
    fn fresh(&mut self) -> Dim {
        self.next += 1;
        Dim::Unknown(self.next - 1)
    }

    fn resolve(&self, d: &Dim) -> Dim {
        let mut d = d.clone();
        while let Dim::Unknown(i) = d {
            match self.subst.get(&i) {
                Some(next) => d = next.clone(),
                None => break,
            }
        }
        d
    }

    fn unify(&mut self, a: &Dim, b: &Dim, context: &str) -> Result<Dim, ShapeError> {
        let (a, b) = (self.resolve(a), self.resolve(b));
        match (&a, &b) {
            _ if a == b => Ok(a),
            (Dim::Unknown(i), _) => {
                self.subst.insert(*i, b.clone());
                Ok(b)
            }
            (_, Dim::Unknown(i)) => {
                self.subst.insert(*i, a.clone());
                Ok(a)
            }
            _ => Err(ShapeError::DimMismatch {
                left: a.to_string(),
                right: b.to_string(),
                context: context.to_string(),
            }),
        }
    }
}

/// Annotates every node of `ast` with a [`Shape`]. Scalars broadcast against
/// vectors and matrices only in `scalar * tensor` and `tensor / scalar`.
pub fn infer_shapes(ast: &Ast, symbols: &SymbolTable) -> Result<ShapedTree, ShapeError> {
    let mut uni = Unifier::default();
    let tree = infer(ast, symbols, &mut uni)?;
    resolve_tree(tree, &uni)
}

fn resolve_tree(tree: ShapedTree, uni: &Unifier) -> Result<ShapedTree, ShapeError> {
    let resolve_dim = |d: &Dim| -> Result<Dim, ShapeError> {
        match uni.resolve(d) {
            Dim::Unknown(_) => Err(ShapeError::UnresolvedDim),
            d => Ok(d),
        }
    };
    let shape = match &tree.shape {
        Shape::Scalar => Shape::Scalar,
        Shape::Vector(n) => Shape::Vector(resolve_dim(n)?),
        Shape::RowVector(n) => Shape::RowVector(resolve_dim(n)?),
        Shape::Matrix(m, n) => Shape::Matrix(resolve_dim(m)?, resolve_dim(n)?),
    };
    let children = tree
        .children
        .into_iter()
        .map(|c| resolve_tree(c, uni))
        .collect::<Result<_, _>>()?;
    Ok(ShapedTree {
        op: tree.op,
        children,
        shape,
    })
}

fn infer(ast: &Ast, symbols: &SymbolTable, uni: &mut Unifier) -> Result<ShapedTree, ShapeError> {
    match ast {
        Ast::Number(r) => Ok(ShapedTree {
            op: Op::Const(r.clone()),
            children: vec![],
            shape: Shape::Scalar,
        }),
        Ast::Variable(name) => {
            let info = symbols
                .get(name)
                .ok_or_else(|| ShapeError::UnknownSymbol(name.clone()))?;
            Ok(ShapedTree {
                op: Op::Var(name.clone()),
                children: vec![],
                shape: info.shape.clone(),
            })
        }
        Ast::Unary(UnaryOp::Neg, a) => {
            let a = infer(a, symbols, uni)?;
            let shape = a.shape.clone();
            Ok(ShapedTree { op: Op::Neg, children: vec![a], shape })
        }
        Ast::Unary(UnaryOp::Transpose, a) => {
            let a = infer(a, symbols, uni)?;
            let shape = a.shape.transposed();
            Ok(ShapedTree { op: Op::Transpose, children: vec![a], shape })
        }
        Ast::Call(f, arg) => {
            let a = infer(arg, symbols, uni)?;
            let (op, shape) = call_shape(*f, &a.shape, uni)?;
            Ok(ShapedTree { op, children: vec![a], shape })
        }
        Ast::Binary(op, lhs, rhs) => {
            let l = infer(lhs, symbols, uni)?;
            let r = infer(rhs, symbols, uni)?;
            let (dag_op, shape) = binary_shape(*op, &l.shape, &r.shape, uni)?;
            Ok(ShapedTree { op: dag_op, children: vec![l, r], shape })
        }
    }
}

fn call_shape(f: Func, arg: &Shape, uni: &mut Unifier) -> Result<(Op, Shape), ShapeError> {
    let bad = || ShapeError::BadOperand {
        op: f.name().into(),
        operand: arg.to_string(),
    };
    match f {
        Func::Sum => match arg {
            Shape::Vector(_) | Shape::RowVector(_) => Ok((Op::Sum, Shape::Scalar)),
            _ => Err(bad()),
        },
        Func::Diag => match arg {
            Shape::Vector(n) => Ok((Op::Diag, Shape::Matrix(n.clone(), n.clone()))),
            _ => Err(bad()),
        },
        Func::Norm2 => match arg {
            Shape::Vector(_) => Ok((Op::Norm2, Shape::Scalar)),
            _ => Err(bad()),
        },
        Func::Vector => match arg {
            Shape::Scalar => Ok((Op::Broadcast, Shape::Vector(uni.fresh()))),
            _ => Err(bad()),
        },
        _ => match arg {
            // Elementwise functions apply to scalars and vectors.
            Shape::Scalar | Shape::Vector(_) => Ok((Op::Apply(f), arg.clone())),
            _ => Err(bad()),
        },
    }
}

fn binary_shape(
    op: BinaryOp,
    l: &Shape,
    r: &Shape,
    uni: &mut Unifier,
) -> Result<(Op, Shape), ShapeError> {
    use Shape::*;
    let bad = || ShapeError::BadOperands {
        op: op.symbol().into(),
        left: l.to_string(),
        right: r.to_string(),
    };
    let unify_shapes = |l: &Shape, r: &Shape, uni: &mut Unifier| -> Result<Shape, ShapeError> {
        match (l, r) {
            (Scalar, Scalar) => Ok(Scalar),
            (Vector(a), Vector(b)) => Ok(Vector(uni.unify(a, b, op.symbol())?)),
            (RowVector(a), RowVector(b)) => Ok(RowVector(uni.unify(a, b, op.symbol())?)),
            (Matrix(a, b), Matrix(c, d)) => Ok(Matrix(
                uni.unify(a, c, op.symbol())?,
                uni.unify(b, d, op.symbol())?,
            )),
            _ => Err(bad()),
        }
    };
    match op {
        BinaryOp::Add | BinaryOp::Sub => {
            let shape = unify_shapes(l, r, uni)?;
            let dag_op = if op == BinaryOp::Add { Op::Add } else { Op::Sub };
            Ok((dag_op, shape))
        }
        BinaryOp::Mul => match (l, r) {
            (Scalar, _) => Ok((Op::Mul, r.clone())),
            (_, Scalar) => Ok((Op::Mul, l.clone())),
            (RowVector(a), Vector(b)) => {
                uni.unify(a, b, "inner product")?;
                Ok((Op::Mul, Scalar))
            }
            (Vector(m), RowVector(n)) => Ok((Op::Mul, Matrix(m.clone(), n.clone()))),
            (Matrix(m, k), Vector(k2)) => {
                uni.unify(k, k2, "matrix-vector product")?;
                Ok((Op::Mul, Vector(m.clone())))
            }
            (RowVector(k), Matrix(k2, n)) => {
                uni.unify(k, k2, "vector-matrix product")?;
                Ok((Op::Mul, RowVector(n.clone())))
            }
            (Matrix(m, k), Matrix(k2, n)) => {
                uni.unify(k, k2, "matrix product")?;
                Ok((Op::Mul, Matrix(m.clone(), n.clone())))
            }
            _ => Err(bad()),
        },
        BinaryOp::Div => match (l, r) {
            (_, Scalar) => Ok((Op::Div, l.clone())),
            _ => Err(bad()),
        },
        BinaryOp::Pow => match (l, r) {
            (Scalar, Scalar) => Ok((Op::Pow, Scalar)),
            _ => Err(bad()),
        },
        BinaryOp::ElemMul => match (l, r) {
            (Scalar, Scalar) => Ok((Op::Mul, Scalar)),
            _ => {
                let shape = unify_shapes(l, r, uni)?;
                Ok((Op::ElemMul, shape))
            }
        },
        BinaryOp::ElemDiv => match (l, r) {
            (Scalar, Scalar) => Ok((Op::Div, Scalar)),
            _ => {
                let shape = unify_shapes(l, r, uni)?;
                Ok((Op::ElemDiv, shape))
            }
        },
        BinaryOp::ElemPow => match (l, r) {
            (Scalar, Scalar) => Ok((Op::Pow, Scalar)),
            (Vector(_), Scalar) => Ok((Op::ElemPow, l.clone())),
            _ => Err(bad()),
        },
    }
}

/// Arena of hash-consed nodes. Children always precede parents, so node ids
/// are topologically ordered.
#[derive(Debug, Clone, Default)]
pub struct DagStore {
    nodes: Vec<Node>,
    index: HashMap<(Op, Vec<NodeId>, Shape), NodeId>,
}

impl DagStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.node(id).op
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.node(id).shape
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.node(id).children
    }

    /// Interns a node, computing its shape from the operator and children.
    pub fn mk(&mut self, op: Op, children: Vec<NodeId>) -> Result<NodeId, ShapeError> {
        let shape = self.shape_of(&op, &children)?;
        Ok(self.intern(op, children, shape))
    }

    /// Interns `vector(c)` with an explicit target dimension.
    pub fn mk_broadcast(&mut self, child: NodeId, dim: Dim) -> NodeId {
        debug_assert!(self.shape(child).is_scalar());
        self.intern(Op::Broadcast, vec![child], Shape::Vector(dim))
    }

    pub fn mk_const(&mut self, value: BigRational) -> NodeId {
        self.intern(Op::Const(value), vec![], Shape::Scalar)
    }

    pub fn mk_int(&mut self, value: i64) -> NodeId {
        self.mk_const(BigRational::from_integer(BigInt::from(value)))
    }

    pub fn mk_var(&mut self, name: &str, shape: Shape) -> NodeId {
        self.intern(Op::Var(name.to_string()), vec![], shape)
    }

    fn intern(&mut self, op: Op, children: Vec<NodeId>, shape: Shape) -> NodeId {
        let key = (op, children, shape);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = NodeId(self.nodes.len() as u32);
        let (op, children, shape) = key.clone();
        self.nodes.push(Node { op, children, shape });
        self.index.insert(key, id);
        id
    }

    fn shape_of(&mut self, op: &Op, children: &[NodeId]) -> Result<Shape, ShapeError> {
        let mut uni = Unifier::default();
        let shapes: Vec<Shape> = children.iter().map(|&c| self.shape(c).clone()).collect();
        match op {
            Op::Const(_) => Ok(Shape::Scalar),
            Op::Var(_) => unreachable!("variables are interned via mk_var"),
            Op::Neg => Ok(shapes[0].clone()),
            Op::Transpose => Ok(shapes[0].transposed()),
            Op::Add => binary_shape(BinaryOp::Add, &shapes[0], &shapes[1], &mut uni).map(|r| r.1),
            Op::Sub => binary_shape(BinaryOp::Sub, &shapes[0], &shapes[1], &mut uni).map(|r| r.1),
            Op::Mul => binary_shape(BinaryOp::Mul, &shapes[0], &shapes[1], &mut uni).map(|r| r.1),
            Op::Div => binary_shape(BinaryOp::Div, &shapes[0], &shapes[1], &mut uni).map(|r| r.1),
            Op::Pow => binary_shape(BinaryOp::Pow, &shapes[0], &shapes[1], &mut uni).map(|r| r.1),
            Op::ElemMul => {
                binary_shape(BinaryOp::ElemMul, &shapes[0], &shapes[1], &mut uni).map(|r| r.1)
            }
            Op::ElemDiv => {
                binary_shape(BinaryOp::ElemDiv, &shapes[0], &shapes[1], &mut uni).map(|r| r.1)
            }
            Op::ElemPow => {
                binary_shape(BinaryOp::ElemPow, &shapes[0], &shapes[1], &mut uni).map(|r| r.1)
            }
            Op::Apply(f) => call_shape(*f, &shapes[0], &mut uni).map(|r| r.1),
            Op::Sum => call_shape(Func::Sum, &shapes[0], &mut uni).map(|r| r.1),
            Op::Diag => call_shape(Func::Diag, &shapes[0], &mut uni).map(|r| r.1),
            Op::Norm2 => call_shape(Func::Norm2, &shapes[0], &mut uni).map(|r| r.1),
            Op::Broadcast => Err(ShapeError::UnresolvedDim),
        }
    }

    /// Post-order over the nodes reachable from `root`, each exactly once.
    pub fn reachable(&self, root: NodeId) -> Vec<NodeId> {
        let mut order = Vec::new();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if seen[id.0 as usize] {
                continue;
            }
            if expanded {
                seen[id.0 as usize] = true;
                order.push(id);
            } else {
                stack.push((id, true));
                for &c in self.children(id) {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Variable leaves reachable from `root`, name -> node id.
    pub fn leaf_table(&self, root: NodeId) -> HashMap<String, NodeId> {
        let mut table = HashMap::new();
        for id in self.reachable(root) {
            if let Op::Var(name) = self.op(id) {
                table.insert(name.clone(), id);
            }
        }
        table
    }
}

/// Hash-consing makes structural equality id equality.
pub fn structurally_equal(a: NodeId, b: NodeId) -> bool {
    a == b
}

/// Interns a resolved [`ShapedTree`] into the store.
pub fn normalize(store: &mut DagStore, tree: &ShapedTree) -> NodeId {
    let children: Vec<NodeId> = tree.children.iter().map(|c| normalize(store, c)).collect();
    store.intern(tree.op.clone(), children, tree.shape.clone())
}

/// Parses, shape-checks and interns an expression in one step.
pub fn lower(
    store: &mut DagStore,
    ast: &Ast,
    symbols: &SymbolTable,
) -> Result<NodeId, ShapeError> {
    let tree = infer_shapes(ast, symbols)?;
    Ok(normalize(store, &tree))
}

/// Reconstructs surface syntax for a node. `u^-1` and `vector(1) ./ u` are
/// the printed forms of the internal reciprocal powers.
pub fn to_ast(store: &DagStore, id: NodeId) -> Ast {
    let node = store.node(id);
    let child = |i: usize| Box::new(to_ast(store, node.children[i]));
    match &node.op {
        Op::Const(c) => Ast::Number(c.clone()),
        Op::Var(v) => Ast::Variable(v.clone()),
        Op::Add => Ast::Binary(BinaryOp::Add, child(0), child(1)),
        Op::Sub => Ast::Binary(BinaryOp::Sub, child(0), child(1)),
        Op::Neg => Ast::Unary(UnaryOp::Neg, child(0)),
        Op::Mul => Ast::Binary(BinaryOp::Mul, child(0), child(1)),
        Op::Div => Ast::Binary(BinaryOp::Div, child(0), child(1)),
        Op::Pow => {
            if let Op::Const(c) = store.op(node.children[1]) {
                if *c == BigRational::from_integer(BigInt::from(-1)) {
                    return Ast::Binary(BinaryOp::Div, Box::new(Ast::num_int(1)), child(0));
                }
            }
            Ast::Binary(BinaryOp::Pow, child(0), child(1))
        }
        Op::ElemMul => Ast::Binary(BinaryOp::ElemMul, child(0), child(1)),
        Op::ElemDiv => Ast::Binary(BinaryOp::ElemDiv, child(0), child(1)),
        Op::ElemPow => {
            if let Op::Const(c) = store.op(node.children[1]) {
                if *c == BigRational::from_integer(BigInt::from(-1)) {
                    let one = Ast::Call(Func::Vector, Box::new(Ast::num_int(1)));
                    return Ast::Binary(BinaryOp::ElemDiv, Box::new(one), child(0));
                }
            }
            Ast::Binary(BinaryOp::ElemPow, child(0), child(1))
        }
        Op::Transpose => Ast::Unary(UnaryOp::Transpose, child(0)),
        Op::Apply(f) => Ast::Call(*f, child(0)),
        Op::Sum => Ast::Call(Func::Sum, child(0)),
        Op::Diag => Ast::Call(Func::Diag, child(0)),
        Op::Norm2 => Ast::Call(Func::Norm2, child(0)),
        Op::Broadcast => Ast::Call(Func::Vector, child(0)),
    }
}

pub fn render_node(store: &DagStore, id: NodeId) -> String {
    crate::ast::render(&to_ast(store, id))
}

/// JSON dump of the sub-DAG under `root` (`--dump-dag`).
pub fn dump_json(store: &DagStore, root: NodeId) -> serde_json::Value {
    let nodes: Vec<serde_json::Value> = store
        .reachable(root)
        .iter()
        .map(|&id| {
            let n = store.node(id);
            serde_json::json!({
                "id": id.0,
                "op": n.op.label(),
                "children": n.children.iter().map(|c| c.0).collect::<Vec<_>>(),
                "shape": n.shape.to_string(),
            })
        })
        .collect();
    serde_json::json!({ "nodes": nodes, "root": root.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn symbols_xw() -> SymbolTable {
        let mut s = SymbolTable::new();
        s.declare(
            "X",
            Shape::Matrix(Dim::Sym("m".into()), Dim::Sym("n".into())),
            Role::Parameter,
        );
        s.declare("w", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        s.declare("y", Shape::Vector(Dim::Sym("m".into())), Role::Parameter);
        s
    }

    #[test]
    fn matrix_vector_product_shape() {
        let ast = parse("X*w").unwrap();
        let tree = infer_shapes(&ast, &symbols_xw()).unwrap();
        assert_eq!(tree.shape, Shape::Vector(Dim::Sym("m".into())));
    }

    #[test]
    fn scalar_stays_scalar() {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        let tree = infer_shapes(&parse("x").unwrap(), &s).unwrap();
        assert_eq!(tree.shape, Shape::Scalar);
    }

    #[test]
    fn inner_product_is_scalar() {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        let tree = infer_shapes(&parse("x'*x").unwrap(), &s).unwrap();
        assert_eq!(tree.shape, Shape::Scalar);
    }

    #[test]
    fn ols_shape_checks() {
        let ast = parse("(X*w-y)'*(X*w-y)").unwrap();
        let tree = infer_shapes(&ast, &symbols_xw()).unwrap();
        assert_eq!(tree.shape, Shape::Scalar);
    }

    #[test]
    fn broadcast_dim_from_context() {
        let mut s = symbols_xw();
        s.declare("v", Shape::Vector(Dim::Sym("m".into())), Role::Parameter);
        let ast = parse("sum(log(exp(-v.*(X*w))+vector(1)))").unwrap();
        let tree = infer_shapes(&ast, &s).unwrap();
        assert_eq!(tree.shape, Shape::Scalar);
    }

    #[test]
    fn unknown_symbol_reported() {
        let s = SymbolTable::new();
        assert_eq!(
            infer_shapes(&parse("x").unwrap(), &s).err(),
            Some(ShapeError::UnknownSymbol("x".into()))
        );
    }

    #[test]
    fn dim_mismatch_rejected() {
        let s = symbols_xw();
        // w has dim n, y has dim m.
        assert!(matches!(
            infer_shapes(&parse("w+y").unwrap(), &s),
            Err(ShapeError::DimMismatch { .. })
        ));
    }

    #[test]
    fn cse_shares_repeated_subtrees() {
        let s = symbols_xw();
        let ast = parse("(X*w-y)'*(X*w-y)").unwrap();
        let mut store = DagStore::new();
        let root = lower(&mut store, &ast, &s).unwrap();
        // X, w, y, X*w, X*w-y, (X*w-y)', product
        assert_eq!(store.reachable(root).len(), 7);
    }

    #[test]
    fn appendix_quadratic_example_has_seven_nodes() {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Vector(Dim::Sym("n".into())), Role::Variable);
        s.declare(
            "A",
            Shape::Matrix(Dim::Sym("n".into()), Dim::Sym("n".into())),
            Role::Parameter,
        );
        let ast = parse("x'*A*x + exp(x'*A*x)").unwrap();
        let mut store = DagStore::new();
        let root = lower(&mut store, &ast, &s).unwrap();
        assert_eq!(store.reachable(root).len(), 7);
    }

    #[test]
    fn tree_without_repeats_is_isomorphic() {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        let ast = parse("exp(x)+1").unwrap();
        let mut store = DagStore::new();
        let root = lower(&mut store, &ast, &s).unwrap();
        assert_eq!(store.reachable(root).len(), 4); // x, exp, 1, +
    }

    #[test]
    fn structural_equality_after_consing() {
        let mut s = SymbolTable::new();
        s.declare("x", Shape::Scalar, Role::Variable);
        s.declare("y", Shape::Scalar, Role::Parameter);
        let mut store = DagStore::new();
        let a = lower(&mut store, &parse("exp(x)").unwrap(), &s).unwrap();
        let b = lower(&mut store, &parse("exp(x)").unwrap(), &s).unwrap();
        let c = lower(&mut store, &parse("exp(y)").unwrap(), &s).unwrap();
        assert!(structurally_equal(a, b));
        assert!(!structurally_equal(a, c));
    }

    #[test]
    fn render_round_trips_through_parser() {
        let s = symbols_xw();
        let mut store = DagStore::new();
        let ast = parse("(X*w-y)'*(X*w-y)").unwrap();
        let root = lower(&mut store, &ast, &s).unwrap();
        let text = render_node(&store, root);
        let root2 = lower(&mut store, &parse(&text).unwrap(), &s).unwrap();
        assert_eq!(root, root2);
    }
}

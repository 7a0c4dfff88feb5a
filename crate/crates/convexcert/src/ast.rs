//! Untyped syntax tree for the expression language.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

/// Elementary functions accepted by the parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Sinh,
    Cosh,
    Tanh,
    Arccos,
    Arcsin,
    Arctan,
    Sum,
    Diag,
    Norm2,
    Vector,
    Abs,
    Sign,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            "arccos" => Func::Arccos,
            "arcsin" => Func::Arcsin,
            "arctan" => Func::Arctan,
            "sum" => Func::Sum,
            "diag" => Func::Diag,
            "norm2" => Func::Norm2,
            "vector" => Func::Vector,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
            Func::Arccos => "arccos",
            Func::Arcsin => "arcsin",
            Func::Arctan => "arctan",
            Func::Sum => "sum",
            Func::Diag => "diag",
            Func::Norm2 => "norm2",
            Func::Vector => "vector",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Neg,
    Transpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    ElemMul,
    ElemDiv,
    ElemPow,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
            BinaryOp::ElemMul => ".*",
            BinaryOp::ElemDiv => "./",
            BinaryOp::ElemPow => ".^",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ast {
    /// A non-negative rational constant parsed from a decimal literal.
    Number(BigRational),
    Variable(String),
    Call(Func, Box<Ast>),
    Unary(UnaryOp, Box<Ast>),
    Binary(BinaryOp, Box<Ast>, Box<Ast>),
}

impl Ast {
    pub fn num_int(n: i64) -> Ast {
        Ast::Number(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn var(name: &str) -> Ast {
        Ast::Variable(name.to_string())
    }
}

/// A relational clause `x > 0` restricting a variable (elementwise for
/// vectors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assumption {
    pub subject: String,
    pub relation: Relation,
    pub bound: BigRational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Relation {
    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Gt => ">",
            Relation::Ge => ">=",
            Relation::Lt => "<",
            Relation::Le => "<=",
        }
    }

    /// Mirror used when a clause is written with the constant on the left.
    pub fn flipped(self) -> Relation {
        match self {
            Relation::Gt => Relation::Lt,
            Relation::Ge => Relation::Le,
            Relation::Lt => Relation::Gt,
            Relation::Le => Relation::Ge,
        }
    }
}

/// Renders a rational as a literal the lexer can read back. Rationals whose
/// denominator is not of the form 2^a * 5^b have no finite decimal expansion
/// and fall back to a quotient.
pub fn render_rational(r: &BigRational) -> String {
    let sign = if r.is_negative() { "-" } else { "" };
    let r = r.abs();
    let (num, den) = (r.numer().clone(), r.denom().clone());
    if den.is_one() {
        return format!("{sign}{num}");
    }
    // Scale the denominator up to a power of ten if possible.
    let mut d = den.clone();
    let mut twos = 0u32;
    let mut fives = 0u32;
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    while (&d % &two).is_zero() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    if d.is_one() {
        let digits = twos.max(fives);
        let scale = BigInt::from(10).pow(digits);
        let scaled = num * &scale / den;
        let s = scaled.to_string();
        let s = format!("{:0>width$}", s, width = digits as usize + 1);
        let split = s.len() - digits as usize;
        format!("{sign}{}.{}", &s[..split], &s[split..])
    } else {
        format!("({sign}{num} / {den})")
    }
}

/// Fully parenthesized canonical text; re-parsing yields a structurally equal
/// tree.
pub fn render(ast: &Ast) -> String {
    match ast {
        Ast::Number(r) => render_rational(r),
        Ast::Variable(name) => name.clone(),
        Ast::Call(f, arg) => format!("{}({})", f.name(), render(arg)),
        Ast::Unary(UnaryOp::Neg, a) => format!("(-{})", render(a)),
        Ast::Unary(UnaryOp::Transpose, a) => match a.as_ref() {
            Ast::Number(_) | Ast::Variable(_) | Ast::Call(..) => format!("{}'", render(a)),
            _ => format!("({})'", render(a)),
        },
        Ast::Binary(op, a, b) => format!("({} {} {})", render(a), op.symbol(), render(b)),
    }
}

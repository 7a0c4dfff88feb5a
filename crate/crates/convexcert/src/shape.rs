//! Shapes with symbolic dimensions.
//!
//! Dimensions are opaque names compared by equality; there is no dimension
//! arithmetic. Vectors are column vectors; transposing one yields a row
//! vector, which is what makes inner and outer products distinguishable
//! during shape inference.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Sym(String),
    Fixed(usize),
    /// Placeholder introduced for `vector(c)` until context pins it down.
    Unknown(u32),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Sym(s) => write!(f, "{s}"),
            Dim::Fixed(n) => write!(f, "{n}"),
            Dim::Unknown(i) => write!(f, "?{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Scalar,
    Vector(Dim),
    RowVector(Dim),
    Matrix(Dim, Dim),
}

impl Shape {
    pub fn is_scalar(&self) -> bool {
        matches!(self, Shape::Scalar)
    }

    pub fn is_vector(&self) -> bool {
        matches!(self, Shape::Vector(_))
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Shape::Matrix(..))
    }

    pub fn transposed(&self) -> Shape {
        match self {
            Shape::Scalar => Shape::Scalar,
            Shape::Vector(n) => Shape::RowVector(n.clone()),
            Shape::RowVector(n) => Shape::Vector(n.clone()),
            Shape::Matrix(m, n) => Shape::Matrix(n.clone(), m.clone()),
        }
    }

    /// Square matrix test, used for the psd interval encoding.
    pub fn is_square(&self) -> bool {
        matches!(self, Shape::Matrix(m, n) if m == n)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector[{n}]"),
            Shape::RowVector(n) => write!(f, "rowvector[{n}]"),
            Shape::Matrix(m, n) => write!(f, "matrix[{m}x{n}]"),
        }
    }
}

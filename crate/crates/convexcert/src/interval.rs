//! Extended-real intervals with exact rational endpoints.
//!
//! Scalar and vector nodes carry an interval over their possible (entrywise)
//! values. Matrix nodes reuse the same type with a different reading: any
//! interval inside `[0, inf)` encodes positive semidefiniteness, any interval
//! inside `(-inf, 0]` encodes negative semidefiniteness.
//!
//! Open endpoints are tracked exactly where cheap (addition, intersection,
//! monotone images) and dropped to closed otherwise; closing an endpoint only
//! widens the interval, so it never breaks soundness.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Bound {
    NegInf,
    Finite(BigRational),
    PosInf,
}

impl Bound {
    fn cmp_bound(&self, other: &Bound) -> Ordering {
        use Bound::*;
        match (self, other) {
            (NegInf, NegInf) | (PosInf, PosInf) => Ordering::Equal,
            (NegInf, _) | (_, PosInf) => Ordering::Less,
            (PosInf, _) | (_, NegInf) => Ordering::Greater,
            (Finite(a), Finite(b)) => a.cmp(b),
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Bound::NegInf => f64::NEG_INFINITY,
            Bound::PosInf => f64::INFINITY,
            Bound::Finite(r) => r.to_f64().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interval {
    pub lo: Bound,
    pub hi: Bound,
    pub lo_open: bool,
    pub hi_open: bool,
}

fn rat(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

impl Interval {
    pub fn new(lo: Bound, hi: Bound, lo_open: bool, hi_open: bool) -> Interval {
        // Infinite endpoints are always open.
        let lo_open = lo_open || matches!(lo, Bound::NegInf);
        let hi_open = hi_open || matches!(hi, Bound::PosInf);
        Interval { lo, hi, lo_open, hi_open }
    }

    pub fn full() -> Interval {
        Interval::new(Bound::NegInf, Bound::PosInf, true, true)
    }

    pub fn point(v: BigRational) -> Interval {
        Interval::new(Bound::Finite(v.clone()), Bound::Finite(v), false, false)
    }

    pub fn point_int(v: i64) -> Interval {
        Interval::point(rat(v))
    }

    /// `[0, inf)`
    pub fn nonneg() -> Interval {
        Interval::new(Bound::Finite(BigRational::zero()), Bound::PosInf, false, true)
    }

    /// `(0, inf)`
    pub fn positive() -> Interval {
        Interval::new(Bound::Finite(BigRational::zero()), Bound::PosInf, true, true)
    }

    /// `(-inf, 0]`
    pub fn nonpos() -> Interval {
        Interval::new(Bound::NegInf, Bound::Finite(BigRational::zero()), true, false)
    }

    /// `(-inf, 0)`
    pub fn negative() -> Interval {
        Interval::new(Bound::NegInf, Bound::Finite(BigRational::zero()), true, true)
    }

    /// Closed finite interval `[a, b]`.
    pub fn closed(a: BigRational, b: BigRational) -> Interval {
        Interval::new(Bound::Finite(a), Bound::Finite(b), false, false)
    }

    pub fn closed_int(a: i64, b: i64) -> Interval {
        Interval::closed(rat(a), rat(b))
    }

    pub fn is_empty(&self) -> bool {
        match self.lo.cmp_bound(&self.hi) {
            Ordering::Greater => true,
            Ordering::Equal => self.lo_open || self.hi_open,
            Ordering::Less => false,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self.lo, Bound::NegInf) && matches!(self.hi, Bound::PosInf)
    }

    /// `self` is contained in `[0, inf)` (reads "psd" on matrix nodes).
    pub fn subset_nonneg(&self) -> bool {
        match &self.lo {
            Bound::NegInf => false,
            Bound::PosInf => true,
            Bound::Finite(r) => !r.is_negative(),
        }
    }

    /// `self` is contained in `(-inf, 0]` (reads "nsd" on matrix nodes).
    pub fn subset_nonpos(&self) -> bool {
        match &self.hi {
            Bound::PosInf => false,
            Bound::NegInf => true,
            Bound::Finite(r) => !r.is_positive(),
        }
    }

    pub fn subset_positive(&self) -> bool {
        match &self.lo {
            Bound::NegInf => false,
            Bound::PosInf => true,
            Bound::Finite(r) => r.is_positive() || (r.is_zero() && self.lo_open),
        }
    }

    /// Lower bound at least one (used for the generalized template's scaling
    /// factor).
    pub fn subset_ge_one(&self) -> bool {
        match &self.lo {
            Bound::NegInf => false,
            Bound::PosInf => true,
            Bound::Finite(r) => *r > BigRational::one() || (*r == BigRational::one() && !self.is_empty()),
        }
    }

    pub fn subset_le_one(&self) -> bool {
        match &self.hi {
            Bound::PosInf => false,
            Bound::NegInf => true,
            Bound::Finite(r) => *r <= BigRational::one(),
        }
    }

    pub fn contains_zero(&self) -> bool {
        let zero = BigRational::zero();
        let lo_ok = match &self.lo {
            Bound::NegInf => true,
            Bound::PosInf => false,
            Bound::Finite(r) => match r.cmp(&zero) {
                Ordering::Less => true,
                Ordering::Equal => !self.lo_open,
                Ordering::Greater => false,
            },
        };
        let hi_ok = match &self.hi {
            Bound::PosInf => true,
            Bound::NegInf => false,
            Bound::Finite(r) => match r.cmp(&zero) {
                Ordering::Greater => true,
                Ordering::Equal => !self.hi_open,
                Ordering::Less => false,
            },
        };
        lo_ok && hi_ok
    }

    pub fn contains_value(&self, v: &BigRational) -> bool {
        let lo_ok = match &self.lo {
            Bound::NegInf => true,
            Bound::PosInf => false,
            Bound::Finite(r) => match r.cmp(v) {
                Ordering::Less => true,
                Ordering::Equal => !self.lo_open,
                Ordering::Greater => false,
            },
        };
        let hi_ok = match &self.hi {
            Bound::PosInf => true,
            Bound::NegInf => false,
            Bound::Finite(r) => match r.cmp(v) {
                Ordering::Greater => true,
                Ordering::Equal => !self.hi_open,
                Ordering::Less => false,
            },
        };
        lo_ok && hi_ok
    }

    pub fn contains_f64(&self, v: f64, slack: f64) -> bool {
        self.lo.as_f64() - slack <= v && v <= self.hi.as_f64() + slack
    }

    /// `self` is a subset of `other`, ignoring open/closed distinctions that
    /// only make `other` look smaller.
    pub fn subset_of(&self, other: &Interval) -> bool {
        let lo_ok = match other.lo.cmp_bound(&self.lo) {
            Ordering::Less => true,
            Ordering::Equal => !other.lo_open || self.lo_open,
            Ordering::Greater => false,
        };
        let hi_ok = match self.hi.cmp_bound(&other.hi) {
            Ordering::Less => true,
            Ordering::Equal => !other.hi_open || self.hi_open,
            Ordering::Greater => false,
        };
        lo_ok && hi_ok
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let (lo, lo_open) = match self.lo.cmp_bound(&other.lo) {
            Ordering::Greater => (self.lo.clone(), self.lo_open),
            Ordering::Less => (other.lo.clone(), other.lo_open),
            Ordering::Equal => (self.lo.clone(), self.lo_open || other.lo_open),
        };
        let (hi, hi_open) = match self.hi.cmp_bound(&other.hi) {
            Ordering::Less => (self.hi.clone(), self.hi_open),
            Ordering::Greater => (other.hi.clone(), other.hi_open),
            Ordering::Equal => (self.hi.clone(), self.hi_open || other.hi_open),
        };
        Interval::new(lo, hi, lo_open, hi_open)
    }

    /// Smallest interval containing both (used for fact-table unions).
    pub fn hull(&self, other: &Interval) -> Interval {
        let (lo, lo_open) = match self.lo.cmp_bound(&other.lo) {
            Ordering::Less => (self.lo.clone(), self.lo_open),
            Ordering::Greater => (other.lo.clone(), other.lo_open),
            Ordering::Equal => (self.lo.clone(), self.lo_open && other.lo_open),
        };
        let (hi, hi_open) = match self.hi.cmp_bound(&other.hi) {
            Ordering::Greater => (self.hi.clone(), self.hi_open),
            Ordering::Less => (other.hi.clone(), other.hi_open),
            Ordering::Equal => (self.hi.clone(), self.hi_open && other.hi_open),
        };
        Interval::new(lo, hi, lo_open, hi_open)
    }

    pub fn neg(&self) -> Interval {
        let neg_bound = |b: &Bound| match b {
            Bound::NegInf => Bound::PosInf,
            Bound::PosInf => Bound::NegInf,
            Bound::Finite(r) => Bound::Finite(-r.clone()),
        };
        Interval::new(neg_bound(&self.hi), neg_bound(&self.lo), self.hi_open, self.lo_open)
    }

    pub fn add(&self, other: &Interval) -> Interval {
        let add_bound = |a: &Bound, b: &Bound, toward_neg: bool| match (a, b) {
            (Bound::Finite(x), Bound::Finite(y)) => Bound::Finite(x + y),
            (Bound::NegInf, Bound::PosInf) | (Bound::PosInf, Bound::NegInf) => {
                // Only reachable for degenerate full operands.
                if toward_neg {
                    Bound::NegInf
                } else {
                    Bound::PosInf
                }
            }
            (Bound::NegInf, _) | (_, Bound::NegInf) => Bound::NegInf,
            (Bound::PosInf, _) | (_, Bound::PosInf) => Bound::PosInf,
        };
        Interval::new(
            add_bound(&self.lo, &other.lo, true),
            add_bound(&self.hi, &other.hi, false),
            self.lo_open || other.lo_open,
            self.hi_open || other.hi_open,
        )
    }

    pub fn sub(&self, other: &Interval) -> Interval {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Interval) -> Interval {
        if self.is_point_zero() || other.is_point_zero() {
            return Interval::point(BigRational::zero());
        }
        // Candidate products of the four endpoint pairs, with the 0 * inf = 0
        // convention; open/closed tracking is dropped except when both
        // operands are single-signed with open zero endpoints.
        let prods = [
            mul_bound(&self.lo, &other.lo),
            mul_bound(&self.lo, &other.hi),
            mul_bound(&self.hi, &other.lo),
            mul_bound(&self.hi, &other.hi),
        ];
        let mut lo = prods[0].clone();
        let mut hi = prods[0].clone();
        for p in &prods[1..] {
            if p.cmp_bound(&lo) == Ordering::Less {
                lo = p.clone();
            }
            if p.cmp_bound(&hi) == Ordering::Greater {
                hi = p.clone();
            }
        }
        let mut out = Interval::new(lo, hi, false, false);
        // Preserve strict signs: (0,inf) * (0,inf) stays open at 0.
        if out.lo == Bound::Finite(BigRational::zero())
            && self.subset_positive()
            && other.subset_positive()
        {
            out.lo_open = true;
        }
        if out.hi == Bound::Finite(BigRational::zero())
            && ((self.subset_positive() && other.neg().subset_positive())
                || (self.neg().subset_positive() && other.subset_positive()))
        {
            out.hi_open = true;
        }
        out
    }

    pub fn div(&self, other: &Interval) -> Interval {
        if other.contains_zero() {
            // Division is undefined at zero, so a zero endpoint contributes
            // no values; shrink it open (same convention as `pow` for
            // negative exponents). A denominator straddling zero stays full.
            let mut d = other.clone();
            if !d.lo_open && d.lo == Bound::Finite(BigRational::zero()) {
                d.lo_open = true;
            }
            if !d.hi_open && d.hi == Bound::Finite(BigRational::zero()) {
                d.hi_open = true;
            }
            if d.contains_zero() || d.is_empty() {
                return Interval::full();
            }
            return self.mul(&d.recip());
        }
        self.mul(&other.recip())
    }

    /// Reciprocal of an interval that does not contain zero.
    fn recip(&self) -> Interval {
        debug_assert!(!self.contains_zero());
        let recip_bound = |b: &Bound, open: bool| -> (Bound, bool) {
            match b {
                Bound::NegInf | Bound::PosInf => (Bound::Finite(BigRational::zero()), true),
                Bound::Finite(r) if r.is_zero() => {
                    // Open zero endpoint: reciprocal diverges.
                    if self.subset_nonneg() {
                        (Bound::PosInf, true)
                    } else {
                        (Bound::NegInf, true)
                    }
                }
                Bound::Finite(r) => (Bound::Finite(r.recip()), open),
            }
        };
        let (a, ao) = recip_bound(&self.hi, self.hi_open);
        let (b, bo) = recip_bound(&self.lo, self.lo_open);
        Interval::new(a, b, ao, bo)
    }

    fn is_point_zero(&self) -> bool {
        self.lo == Bound::Finite(BigRational::zero()) && self.lo == self.hi
    }

    /// Image of `self` under `t -> t^c` for a constant rational exponent,
    /// per the power-function case analysis: even integer exponents are
    /// non-negative; positive bases stay positive for any exponent; negative
    /// bases follow integer parity; everything else widens.
    pub fn pow(&self, c: &BigRational) -> Interval {
        if c.is_zero() {
            return Interval::point(BigRational::one());
        }
        if c.is_integer() {
            let n = match c.to_integer().to_i32() {
                Some(n) => n,
                None => return Interval::full(),
            };
            return self.pow_int(n);
        }
        // Non-integer exponent: only defined (real) for non-negative bases.
        if self.subset_nonneg() || self.subset_positive() {
            let mut out = if self.subset_positive() {
                Interval::positive()
            } else if c.is_positive() {
                Interval::nonneg()
            } else {
                // 0^c undefined for c < 0; positive elsewhere.
                Interval::positive()
            };
            if c.is_positive() {
                if self.subset_ge_one() {
                    out = out.intersect(&Interval::new(
                        Bound::Finite(BigRational::one()),
                        Bound::PosInf,
                        false,
                        true,
                    ));
                }
                if self.subset_le_one() && self.subset_nonneg() {
                    out = out.intersect(&Interval::new(
                        Bound::Finite(BigRational::zero()),
                        Bound::Finite(BigRational::one()),
                        false,
                        false,
                    ));
                }
            }
            out
        } else {
            Interval::full()
        }
    }

    fn pow_int(&self, n: i32) -> Interval {
        let pow_bound = |b: &Bound, n: i32| -> Bound {
            match b {
                Bound::Finite(r) => {
                    if r.is_zero() && n < 0 {
                        Bound::PosInf // limit from the relevant side; handled by caller
                    } else {
                        Bound::Finite(r.pow(n))
                    }
                }
                Bound::PosInf => {
                    if n > 0 {
                        Bound::PosInf
                    } else {
                        Bound::Finite(BigRational::zero())
                    }
                }
                Bound::NegInf => {
                    if n > 0 {
                        if n % 2 == 0 {
                            Bound::PosInf
                        } else {
                            Bound::NegInf
                        }
                    } else {
                        Bound::Finite(BigRational::zero())
                    }
                }
            }
        };
        let even = n % 2 == 0;
        if n > 0 {
            if even {
                if self.subset_nonneg() {
                    Interval::new(pow_bound(&self.lo, n), pow_bound(&self.hi, n), self.lo_open, self.hi_open)
                } else if self.subset_nonpos() {
                    Interval::new(pow_bound(&self.hi, n), pow_bound(&self.lo, n), self.hi_open, self.lo_open)
                } else {
                    let cap = pow_bound(&self.lo, n).cmp_bound(&pow_bound(&self.hi, n));
                    let hi = if cap == Ordering::Greater {
                        pow_bound(&self.lo, n)
                    } else {
                        pow_bound(&self.hi, n)
                    };
                    Interval::new(Bound::Finite(BigRational::zero()), hi, false, false)
                }
            } else {
                Interval::new(pow_bound(&self.lo, n), pow_bound(&self.hi, n), self.lo_open, self.hi_open)
            }
        } else {
            // Negative exponent.
            if self.contains_zero() {
                if even {
                    Interval::nonneg()
                } else {
                    Interval::full()
                }
            } else if self.subset_positive() || self.subset_nonneg() {
                Interval::new(pow_bound(&self.hi, n), pow_bound(&self.lo, n), self.hi_open, self.lo_open)
            } else if even {
                Interval::new(pow_bound(&self.lo, n), pow_bound(&self.hi, n), self.lo_open, self.hi_open)
            } else {
                // Negative base, odd negative exponent: decreasing on (-inf,0).
                Interval::new(pow_bound(&self.hi, n), pow_bound(&self.lo, n), self.hi_open, self.lo_open)
            }
        }
    }
}

fn mul_bound(a: &Bound, b: &Bound) -> Bound {
    use Bound::*;
    match (a, b) {
        (Finite(x), Finite(y)) => Finite(x * y),
        (Finite(x), inf) | (inf, Finite(x)) => {
            if x.is_zero() {
                Finite(BigRational::zero())
            } else if x.is_positive() == matches!(inf, PosInf) {
                PosInf
            } else {
                NegInf
            }
        }
        (PosInf, PosInf) | (NegInf, NegInf) => PosInf,
        _ => NegInf,
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lo = match &self.lo {
            Bound::NegInf => "-inf".to_string(),
            Bound::PosInf => "+inf".to_string(),
            Bound::Finite(r) => crate::ast::render_rational(r),
        };
        let hi = match &self.hi {
            Bound::NegInf => "-inf".to_string(),
            Bound::PosInf => "+inf".to_string(),
            Bound::Finite(r) => crate::ast::render_rational(r),
        };
        write!(
            f,
            "{}{}, {}{}",
            if self.lo_open { "(" } else { "[" },
            lo,
            hi,
            if self.hi_open { ")" } else { "]" },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_point_to_positive() {
        // [1,1] + (0,inf) = (1,inf)
        let r = Interval::point_int(1).add(&Interval::positive());
        assert_eq!(r.to_string(), "(1, +inf)");
    }

    #[test]
    fn mul_unit_squares() {
        // [0,1] * [0,1] = [0,1]
        let u = Interval::closed_int(0, 1);
        let r = u.mul(&u);
        assert_eq!(r.to_string(), "[0, 1]");
    }

    #[test]
    fn scalar_times_nonneg() {
        let r = Interval::point_int(2).mul(&Interval::nonneg());
        assert!(r.subset_nonneg());
    }

    #[test]
    fn division_by_zero_straddle_widens() {
        let r = Interval::point_int(1).div(&Interval::closed_int(-1, 1));
        assert!(r.is_full());
    }

    #[test]
    fn division_by_positive() {
        // [2,4] / [1,2] = [1,4]
        let r = Interval::closed_int(2, 4).div(&Interval::closed_int(1, 2));
        assert_eq!(r.to_string(), "[1, 4]");
    }

    #[test]
    fn reciprocal_of_positive_is_positive() {
        let r = Interval::point_int(1).div(&Interval::positive());
        assert!(r.subset_positive());
    }

    #[test]
    fn even_power_of_reals_is_nonneg() {
        let r = Interval::full().pow(&rat(2));
        assert_eq!(r, Interval::nonneg());
    }

    #[test]
    fn reciprocal_pow_of_positive() {
        let r = Interval::positive().pow(&rat(-1));
        assert!(r.subset_positive());
    }

    #[test]
    fn odd_cube_of_negative_stays_negative() {
        let r = Interval::negative().pow(&rat(3));
        assert!(r.subset_nonpos());
        assert!(!r.subset_nonneg());
    }

    #[test]
    fn fractional_power_of_ge_one() {
        let base = Interval::new(Bound::Finite(BigRational::one()), Bound::PosInf, false, true);
        let r = base.pow(&BigRational::new(1.into(), 2.into()));
        assert!(r.subset_ge_one());
    }

    #[test]
    fn intersect_and_subset() {
        let a = Interval::positive();
        let b = Interval::closed_int(-1, 1);
        let c = a.intersect(&b);
        assert_eq!(c.to_string(), "(0, 1]");
        assert!(c.subset_of(&a));
        assert!(c.subset_of(&b));
        assert!(!a.subset_of(&b));
    }

    #[test]
    fn empty_detection() {
        let e = Interval::positive().intersect(&Interval::negative());
        assert!(e.is_empty());
        assert!(!Interval::point_int(0).is_empty());
    }

    #[test]
    fn negative_interval_squared() {
        let r = Interval::closed_int(-3, -2).pow(&rat(2));
        assert_eq!(r.to_string(), "[4, 9]");
    }

    #[test]
    fn straddling_interval_squared() {
        let r = Interval::closed_int(-3, 2).pow(&rat(2));
        assert_eq!(r.to_string(), "[0, 9]");
    }

    #[test]
    fn point_zero_multiplication() {
        let r = Interval::point_int(0).mul(&Interval::full());
        assert_eq!(r, Interval::point(BigRational::zero()));
    }
}

//! Dimensional algebra over `(currency, shares, time)` exponents and the
//! per-operator legality rules used to prune actions before evaluation.
//!
//! Only a handful of rules follow directly from first principles (adding
//! quantities of different dimension is meaningless); the rest of the table
//! is a completion chosen for this crate:
//!
//! | operator                          | rule                                         |
//! |-----------------------------------|----------------------------------------------|
//! | Add, Sub                          | operands equal, output = operand             |
//! | TS-Mean, TS-Std, TS-Max, TS-Min, TS-Delta | window dimensionless, output = series |
//! | Mul / Div                         | exponent sum / difference                    |
//! | Abs                               | output = input                               |
//! | Ln                                | input must be dimensionless                  |
//! | Sign, CS-Rank, TS-Rank, TS-Corr   | output dimensionless                         |
//! | TS-Cov                            | output = sum of the two series               |
//!
//! Constants and windows are dimensionless. Exponents outside
//! `[-max_exponent, max_exponent]` are illegal.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{ExprTree, Operator};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DimensionError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dimension {
    pub currency: i8,
    pub shares: i8,
    pub time: i8,
}

impl Dimension {
    pub const NONE: Dimension = Dimension { currency: 0, shares: 0, time: 0 };
    pub const CURRENCY: Dimension = Dimension { currency: 1, shares: 0, time: 0 };
    pub const SHARES: Dimension = Dimension { currency: 0, shares: 1, time: 0 };

    pub const fn new(currency: i8, shares: i8, time: i8) -> Self {
        Dimension { currency, shares, time }
    }

    pub fn is_dimensionless(self) -> bool {
        self == Dimension::NONE
    }

    fn max_abs(self) -> i8 {
        self.currency.abs().max(self.shares.abs()).max(self.time.abs())
    }
}

impl Add for Dimension {
    type Output = Dimension;
    fn add(self, o: Dimension) -> Dimension {
        Dimension::new(
            self.currency.saturating_add(o.currency),
            self.shares.saturating_add(o.shares),
            self.time.saturating_add(o.time),
        )
    }
}

impl Neg for Dimension {
    type Output = Dimension;
    fn neg(self) -> Dimension {
        Dimension::new(-self.currency, -self.shares, -self.time)
    }
}

impl Sub for Dimension {
    type Output = Dimension;
    fn sub(self, o: Dimension) -> Dimension {
        self + (-o)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.currency, self.shares, self.time)
    }
}

/// Feature dimensions plus the operator table.
#[derive(Clone, Debug, PartialEq)]
pub struct DimRules {
    features: BTreeMap<String, Dimension>,
    max_exponent: i8,
}

pub const DEFAULT_MAX_EXPONENT: i8 = 3;

pub fn default_feature_dimensions() -> BTreeMap<String, Dimension> {
    let mut m = BTreeMap::new();
    for f in ["open", "close", "high", "low", "vwap"] {
        m.insert(f.to_string(), Dimension::CURRENCY);
    }
    m.insert("volume".to_string(), Dimension::SHARES);
    m
}

impl Default for DimRules {
    fn default() -> Self {
        DimRules::new(default_feature_dimensions(), DEFAULT_MAX_EXPONENT)
    }
}

impl DimRules {
    pub fn new(features: BTreeMap<String, Dimension>, max_exponent: i8) -> Self {
        DimRules { features, max_exponent }
    }

    pub fn feature_dimensions(&self) -> &BTreeMap<String, Dimension> {
        &self.features
    }

    pub fn max_exponent(&self) -> i8 {
        self.max_exponent
    }

    pub fn feature_dimension(&self, feature: &str) -> Result<Dimension, DimensionError> {
        self.features
            .get(feature)
            .copied()
            .ok_or_else(|| DimensionError::UnknownFeature(feature.to_string()))
    }

    fn bounded(&self, d: Dimension) -> Option<Dimension> {
        (d.max_abs() <= self.max_exponent).then_some(d)
    }

    /// Output dimension of `op` applied to arguments of the given dimensions,
    /// or `None` when the combination is illegal. Window arguments are
    /// passed like any other operand and must be dimensionless.
    pub fn result_dimension(&self, op: Operator, args: &[Dimension]) -> Option<Dimension> {
        use Operator::*;
        if args.len() != op.arity() {
            return None;
        }
        if let Some(w) = op.window_slot() {
            if !args[w].is_dimensionless() {
                return None;
            }
        }
        let out = match op {
            Start | End => Dimension::NONE,
            Add | Sub => {
                if args[0] != args[1] {
                    return None;
                }
                args[0]
            }
            Mul => args[0] + args[1],
            Div => args[0] - args[1],
            Abs | TsMean | TsStd | TsMax | TsMin | TsDelta => args[0],
            Ln => {
                if !args[0].is_dimensionless() {
                    return None;
                }
                Dimension::NONE
            }
            Sign | CsRank | TsRank | TsCorr => Dimension::NONE,
            TsCov => args[0] + args[1],
        };
        self.bounded(out)
    }

    /// Checks a whole tree from the leaves up.
    pub fn check_tree(&self, tree: &ExprTree) -> Option<Dimension> {
        match tree {
            ExprTree::Scalar(_) => Some(Dimension::NONE),
            ExprTree::Feature(f) => self.feature_dimension(f.name()).ok(),
            ExprTree::Node { op, children } => {
                let dims = children
                    .iter()
                    .map(|c| self.check_tree(c))
                    .collect::<Option<Vec<_>>>()?;
                self.result_dimension(*op, &dims)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: Dimension = Dimension::CURRENCY;
    const V: Dimension = Dimension::SHARES;
    const N: Dimension = Dimension::NONE;

    #[test]
    fn feature_table() {
        let r = DimRules::default();
        assert_eq!(r.feature_dimension("close"), Ok(P));
        assert_eq!(r.feature_dimension("vwap"), Ok(P));
        assert_eq!(r.feature_dimension("volume"), Ok(V));
        assert_eq!(r.feature_dimension("beta"), Err(DimensionError::UnknownFeature("beta".into())));
    }

    #[test]
    fn add_requires_matching_dimensions() {
        let r = DimRules::default();
        assert_eq!(r.result_dimension(Operator::Add, &[P, P]), Some(P));
        assert_eq!(r.result_dimension(Operator::Add, &[P, V]), None);
        assert_eq!(r.result_dimension(Operator::Sub, &[P, N]), None);
        assert_eq!(r.result_dimension(Operator::Add, &[N, N]), Some(N));
    }

    #[test]
    fn mul_div_and_friends() {
        let r = DimRules::default();
        assert_eq!(r.result_dimension(Operator::Div, &[P, P]), Some(N));
        assert_eq!(r.result_dimension(Operator::Mul, &[P, V]), Some(Dimension::new(1, 1, 0)));
        assert_eq!(r.result_dimension(Operator::Mul, &[P, N]), Some(P));
        assert_eq!(r.result_dimension(Operator::Ln, &[P]), None);
        assert_eq!(r.result_dimension(Operator::Ln, &[N]), Some(N));
        assert_eq!(r.result_dimension(Operator::Sign, &[V]), Some(N));
        assert_eq!(r.result_dimension(Operator::TsMean, &[V, N]), Some(V));
        assert_eq!(r.result_dimension(Operator::TsMean, &[V, P]), None);
        assert_eq!(r.result_dimension(Operator::TsCorr, &[P, V, N]), Some(N));
        assert_eq!(r.result_dimension(Operator::TsCov, &[P, V, N]), Some(Dimension::new(1, 1, 0)));
        assert_eq!(r.result_dimension(Operator::Add, &[P]), None);
    }

    #[test]
    fn exponent_bound() {
        let r = DimRules::default();
        let p3 = Dimension::new(3, 0, 0);
        assert_eq!(r.result_dimension(Operator::Mul, &[p3, N]), Some(p3));
        assert_eq!(r.result_dimension(Operator::Mul, &[p3, P]), None);
    }

    #[test]
    fn whole_tree_check() {
        let r = DimRules::default();
        let fig1 = ExprTree::node(
            Operator::Div,
            vec![
                ExprTree::node(Operator::Sub, vec![ExprTree::feature("close"), ExprTree::feature("open")]),
                ExprTree::node(Operator::Sub, vec![ExprTree::feature("high"), ExprTree::feature("low")]),
            ],
        );
        assert_eq!(r.check_tree(&fig1), Some(N));
        let bad = ExprTree::node(Operator::Add, vec![ExprTree::feature("close"), ExprTree::feature("volume")]);
        assert_eq!(r.check_tree(&bad), None);
    }

    fn small_dim() -> impl Strategy<Value = Dimension> {
        (-1i8..=1, -1i8..=1, -1i8..=1).prop_map(|(a, b, c)| Dimension::new(a, b, c))
    }

    proptest! {
        #[test]
        fn mul_div_group(a in small_dim(), b in small_dim()) {
            let r = DimRules::default();
            let ab = r.result_dimension(Operator::Mul, &[a, b]).unwrap();
            prop_assert_eq!(r.result_dimension(Operator::Div, &[ab, b]), Some(a));
        }

        #[test]
        fn rules_are_total(a in small_dim(), b in small_dim(), c in small_dim()) {
            let r = DimRules::default();
            for op in Operator::ALL {
                let args = [a, b, c];
                let x = r.result_dimension(op, &args[..op.arity()]);
                prop_assert_eq!(x, r.result_dimension(op, &args[..op.arity()]));
            }
        }
    }
}

//! Basis functions of the covariates.
//!
//! The same type describes both the moment functions that are matched and
//! the linear predictor of the log propensity ratio. Columns are always kept
//! in canonical order: constant, linear terms, squares, then interactions in
//! lexicographic order.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A single basis function; covariate indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BasisTerm {
    Constant,
    Linear(usize),
    Square(usize),
    Interaction(usize, usize),
}

impl BasisTerm {
    pub fn degree(self) -> usize {
        match self {
            BasisTerm::Constant => 0,
            BasisTerm::Linear(_) => 1,
            BasisTerm::Square(_) | BasisTerm::Interaction(..) => 2,
        }
    }

    fn max_index(self) -> Option<usize> {
        match self {
            BasisTerm::Constant => None,
            BasisTerm::Linear(i) | BasisTerm::Square(i) => Some(i),
            BasisTerm::Interaction(i, j) => Some(i.max(j)),
        }
    }

    #[inline]
    pub fn eval(self, row: &[f64]) -> f64 {
        match self {
            BasisTerm::Constant => 1.0,
            BasisTerm::Linear(i) => row[i],
            BasisTerm::Square(i) => row[i] * row[i],
            BasisTerm::Interaction(i, j) => row[i] * row[j],
        }
    }

    /// Covariate indices appearing in the term, with multiplicity.
    fn factors(self) -> Vec<usize> {
        match self {
            BasisTerm::Constant => vec![],
            BasisTerm::Linear(i) => vec![i],
            BasisTerm::Square(i) => vec![i, i],
            BasisTerm::Interaction(i, j) => vec![i, j],
        }
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisTerm::Constant => write!(f, "1"),
            BasisTerm::Linear(i) => write!(f, "l{}", i + 1),
            BasisTerm::Square(i) => write!(f, "l{}^2", i + 1),
            BasisTerm::Interaction(i, j) => write!(f, "l{}*l{}", i + 1, j + 1),
        }
    }
}

impl FromStr for BasisTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let var = |t: &str| -> Result<usize> {
            t.trim()
                .strip_prefix('l')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| n - 1)
                .ok_or_else(|| Error::validation(format!("bad basis term `{s}`")))
        };
        if s == "1" {
            return Ok(BasisTerm::Constant);
        }
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(BasisTerm::Square(var(base)?));
        }
        if let Some((a, b)) = s.split_once('*') {
            let (a, b) = (var(a)?, var(b)?);
            return Ok(if a == b {
                BasisTerm::Square(a)
            } else {
                BasisTerm::Interaction(a.min(b), a.max(b))
            });
        }
        Ok(BasisTerm::Linear(var(s)?))
    }
}

impl Serialize for BasisTerm {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BasisTerm {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An ordered, duplicate-free list of basis terms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<BasisTerm>", into = "Vec<BasisTerm>")]
pub struct BasisSpec {
    terms: Vec<BasisTerm>,
}

impl TryFrom<Vec<BasisTerm>> for BasisSpec {
    type Error = Error;

    fn try_from(terms: Vec<BasisTerm>) -> Result<Self> {
        BasisSpec::new(terms)
    }
}

impl From<BasisSpec> for Vec<BasisTerm> {
    fn from(b: BasisSpec) -> Self {
        b.terms
    }
}

impl BasisSpec {
    pub fn new(mut terms: Vec<BasisTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::validation("basis needs at least one term"));
        }
        for t in &mut terms {
            if let BasisTerm::Interaction(i, j) = *t {
                *t = match i.cmp(&j) {
                    std::cmp::Ordering::Equal => BasisTerm::Square(i),
                    std::cmp::Ordering::Less => BasisTerm::Interaction(i, j),
                    std::cmp::Ordering::Greater => BasisTerm::Interaction(j, i),
                };
            }
        }
        terms.sort();
        terms.dedup();
        Ok(Self { terms })
    }

    /// `{1, l1, ..., l_d}`.
    pub fn main_effects(d: usize) -> Self {
        let mut terms = vec![BasisTerm::Constant];
        terms.extend((0..d).map(BasisTerm::Linear));
        Self { terms }
    }

    /// `{1, l1, ..., l_d, l1^2, ..., l_d^2}`.
    pub fn with_squares(d: usize) -> Self {
        let mut terms = Self::main_effects(d).terms;
        terms.extend((0..d).map(BasisTerm::Square));
        Self { terms }
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_constant(&self) -> bool {
        self.terms.first() == Some(&BasisTerm::Constant)
    }

    pub fn max_degree(&self) -> usize {
        self.terms.iter().map(|t| t.degree()).max().unwrap_or(0)
    }

    /// Fails if a term refers to a covariate beyond `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if let Some(i) = t.max_index() {
                if i >= dim {
                    return Err(Error::validation(format!(
                        "basis term {t} refers to covariate l{} but only {dim} covariates exist",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn eval_row(&self, row: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.terms.iter().map(|t| t.eval(row)))
    }

    /// Design matrix with one row per participant.
    pub fn design(&self, covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(covariates.ncols())?;
        let n = covariates.nrows();
        let mut out = DMatrix::zeros(n, self.len());
        let mut row = vec![0.0; covariates.ncols()];
        for i in 0..n {
            for (c, v) in row.iter_mut().enumerate() {
                *v = covariates[(i, c)];
            }
            for (col, t) in self.terms.iter().enumerate() {
                out[(i, col)] = t.eval(&row);
            }
        }
        Ok(out)
    }

    /// Basis means implied by first moments `mean` and the raw second-moment
    /// matrix `second` (`E[L L^T]`). Terms of degree above two are unavailable.
    pub fn mean_from_moments(&self, mean: &DVector<f64>, second: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.terms.iter().map(|&t| match t {
                BasisTerm::Constant => 1.0,
                BasisTerm::Linear(i) => mean[i],
                BasisTerm::Square(i) => second[(i, i)],
                BasisTerm::Interaction(i, j) => second[(i, j)],
            }),
        )
    }

    /// `E[phi phi^T]` from first and raw second moments, available only when
    /// every product has degree at most two.
    pub fn outer_from_moments(
        &self,
        mean: &DVector<f64>,
        second: &DMatrix<f64>,
    ) -> Option<DMatrix<f64>> {
        let d = self.len();
        let mut out = DMatrix::zeros(d, d);
        for (a, &ta) in self.terms.iter().enumerate() {
            for (b, &tb) in self.terms.iter().enumerate() {
                let mut f = ta.factors();
                f.extend(tb.factors());
                out[(a, b)] = match f.as_slice() {
                    [] => 1.0,
                    [i] => mean[*i],
                    [i, j] => second[(*i, *j)],
                    _ => return None,
                };
            }
        }
        Some(out)
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

impl FromStr for BasisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
        let terms = inner
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        BasisSpec::new(terms)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_and_linear_columns() {
        let spec: BasisSpec = "{1, l1}".parse().unwrap();
        let cov = DMatrix::from_row_slice(2, 1, &[0.2, 0.8]);
        let x = spec.design(&cov).unwrap();
        assert_eq!(x.column(0).as_slice(), &[1.0, 1.0]);
        assert_eq!(x.column(1).as_slice(), &[0.2, 0.8]);
    }

    #[test]
    fn five_function_example_dimension() {
        let spec: BasisSpec = "1, l1, l2, l1^2, l2^2".parse().unwrap();
        assert_eq!(spec.len(), 5);
        assert_eq!(spec, BasisSpec::with_squares(2));
    }

    #[test]
    fn canonical_order() {
        let spec: BasisSpec = "l2*l1, l1^2, l2, 1, l1, l1*l3".parse().unwrap();
        assert_eq!(spec.to_string(), "{1, l1, l2, l1^2, l1*l2, l1*l3}");
    }

    #[test]
    fn out_of_range_interaction() {
        let spec: BasisSpec = "1, l1*l3".parse().unwrap();
        let cov = DMatrix::zeros(3, 2);
        assert!(spec.design(&cov).is_err());
    }

    #[test]
    fn outer_moments_need_degree_two() {
        let mean = DVector::from_vec(vec![0.5, 0.2]);
        let second = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let outer = BasisSpec::main_effects(2).outer_from_moments(&mean, &second).unwrap();
        assert_eq!(outer[(0, 0)], 1.0);
        assert_eq!(outer[(0, 2)], 0.2);
        assert_eq!(outer[(1, 2)], 0.1);
        assert!(BasisSpec::with_squares(2).outer_from_moments(&mean, &second).is_none());
    }

    proptest! {
        #[test]
        fn square_column_is_linear_times_itself(vals in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let n = vals.len();
            let cov = DMatrix::from_column_slice(n, 1, &vals);
            let x = BasisSpec::with_squares(1).design(&cov).unwrap();
            for i in 0..n {
                prop_assert_eq!(x[(i, 2)], x[(i, 1)] * x[(i, 1)]);
            }
        }
    }
}

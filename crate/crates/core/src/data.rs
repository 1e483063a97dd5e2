//! Partially observed data grouped by missingness pattern.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::error::{FimlError, Result};
use crate::scalar::Scalar;

/// Target number of cases per reduction batch. Batch boundaries depend only on
/// the data, so parallel reductions are bit-identical across thread counts.
const BATCH_CASES: usize = 256;

/// Cases sharing one observation mask.
#[derive(Debug, Clone)]
pub struct Pattern<T> {
    mask: Vec<bool>,
    observed: Vec<usize>,
    cases: Vec<usize>,
    /// Observed values of every case, `cases.len() x observed.len()` row-major.
    values: Vec<T>,
}

impl<T: Scalar> Pattern<T> {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Indices of the observed variables, ascending.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Indices of the cases with this pattern, ascending.
    pub fn cases(&self) -> &[usize] {
        &self.cases
    }

    /// Observed values of the `pos`-th case of this pattern.
    #[inline]
    pub fn case_values(&self, pos: usize) -> &[T] {
        let k = self.observed.len();
        &self.values[pos * k..(pos + 1) * k]
    }
}

/// Number of cases in which each variable is observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObsCounts(pub Vec<usize>);

impl ObsCounts {
    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub pattern: usize,
    pub range: (usize, usize),
}

/// `N x p` data matrix with an observation mask.
#[derive(Debug, Clone)]
pub struct ObservedDataset<T> {
    values: Array2<T>,
    mask: Array2<bool>,
    patterns: Vec<Pattern<T>>,
    nobs: ObsCounts,
    batches: Vec<Vec<Segment>>,
}

impl<T: Scalar> ObservedDataset<T> {
    /// Missing cells of `values` are ignored; they are stored as zero.
    pub fn new(values: Array2<T>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(FimlError::Dimension(format!(
                "values are {:?} but mask is {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        let (n, p) = values.dim();
        if n == 0 || p == 0 {
            return Err(FimlError::EmptyDataset);
        }
        let empty: Vec<usize> = (0..n).filter(|&r| !mask.row(r).iter().any(|&b| b)).collect();
        if !empty.is_empty() {
            return Err(FimlError::EmptyCases(empty));
        }
        let mut values = values;
        for ((r, c), v) in values.indexed_iter_mut() {
            if !mask[[r, c]] {
                *v = T::zero();
            } else if !v.is_finite() {
                return Err(FimlError::Parse(format!("non-finite value at row {r}, column {c}")));
            }
        }
        let patterns = build_pattern_index(&values, &mask);
        let nobs = ObsCounts(mask.axis_iter(Axis(1)).map(|c| c.iter().filter(|&&b| b).count()).collect());
        let batches = make_batches(&patterns);
        Ok(Self { values, mask, patterns, nobs, batches })
    }

    /// A fully observed dataset.
    pub fn complete(values: Array2<T>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(values, mask)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn patterns(&self) -> &[Pattern<T>] {
        &self.patterns
    }

    pub fn nobs(&self) -> &ObsCounts {
        &self.nobs
    }

    pub fn observed_cells(&self) -> usize {
        self.nobs.0.iter().sum()
    }

    /// Keeps only the listed columns. Fails if a case loses all observations.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        Self::new(self.values.select(Axis(1), cols), self.mask.select(Axis(1), cols))
    }

    /// Same values with a different mask.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        Self::new(self.values.clone(), mask)
    }

    /// Per-variable mean and (biased) variance over observed cells.
    pub fn observed_moments(&self) -> Result<(Array1<T>, Array1<T>)> {
        let p = self.p();
        let mut mean = Array1::zeros(p);
        let mut var = Array1::zeros(p);
        for i in 0..p {
            let cnt = self.nobs.0[i];
            if cnt == 0 {
                return Err(FimlError::UnobservedVariable(i));
            }
            let col = self.values.column(i);
            let mcol = self.mask.column(i);
            let c = T::from_usize(cnt).unwrap();
            let s: T = col.iter().zip(mcol.iter()).filter(|(_, &b)| b).map(|(v, _)| *v).sum();
            let mu = s / c;
            let ss: T = col
                .iter()
                .zip(mcol.iter())
                .filter(|(_, &b)| b)
                .map(|(v, _)| (*v - mu) * (*v - mu))
                .sum();
            mean[i] = mu;
            var[i] = ss / c;
        }
        Ok((mean, var))
    }

    /// Runs `f` over every batch of cases in parallel and folds the batch
    /// accumulators with `merge` in batch order, so the result does not
    /// depend on the number of threads.
    pub(crate) fn reduce_batches<A, I, F, M>(&self, init: I, f: F, mut merge: M) -> Result<A>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, &Pattern<T>, Range<usize>) -> Result<()> + Sync,
        M: FnMut(&mut A, A),
    {
        let window = 2 * rayon::current_num_threads().max(1);
        let mut total = init();
        for group in self.batches.chunks(window) {
            let parts: Vec<Result<A>> = group
                .par_iter()
                .map(|batch| {
                    let mut acc = init();
                    for seg in batch {
                        f(&mut acc, &self.patterns[seg.pattern], seg.range.0..seg.range.1)?;
                    }
                    Ok(acc)
                })
                .collect();
            for part in parts {
                merge(&mut total, part?);
            }
        }
        Ok(total)
    }
}

/// Groups cases by identical mask row, in order of first appearance.
pub fn build_pattern_index<T: Scalar>(values: &Array2<T>, mask: &Array2<bool>) -> Vec<Pattern<T>> {
    let mut lookup: HashMap<Vec<bool>, usize> = HashMap::new();
    let mut patterns: Vec<Pattern<T>> = Vec::new();
    for (r, row) in mask.axis_iter(Axis(0)).enumerate() {
        let key: Vec<bool> = row.to_vec();
        let idx = match lookup.get(&key) {
            Some(&i) => i,
            None => {
                let observed = key.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                patterns.push(Pattern { mask: key.clone(), observed, cases: Vec::new(), values: Vec::new() });
                lookup.insert(key, patterns.len() - 1);
                patterns.len() - 1
            }
        };
        let pat = &mut patterns[idx];
        pat.cases.push(r);
        let vals = values.row(r);
        for &i in &pat.observed {
            pat.values.push(vals[i]);
        }
    }
    patterns
}

fn make_batches<T>(patterns: &[Pattern<T>]) -> Vec<Vec<Segment>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut filled = 0;
    for (pi, pat) in patterns.iter().enumerate() {
        let mut start = 0;
        let len = pat.cases.len();
        while start < len {
            let take = (BATCH_CASES - filled).min(len - start);
            current.push(Segment { pattern: pi, range: (start, start + take) });
            filled += take;
            start += take;
            if filled >= BATCH_CASES {
                batches.push(std::mem::take(&mut current));
                filled = 0;
            }
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

//! External clustering scores: accuracy under the best one-to-one label
//! mapping, normalized mutual information and the (unadjusted) Rand index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FmtcError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(values: Vec<usize>) -> Self {
        LabelVector(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabelVector {
        LabelVector(idx.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<Vec<usize>> for LabelVector {
    fn from(v: Vec<usize>) -> Self {
        LabelVector(v)
    }
}

/// Dense contingency table; rows index `pred` labels, columns `truth`.
struct Contingency {
    table: Vec<Vec<u64>>,
    n: u64,
}

impl Contingency {
    fn new(pred: &LabelVector, truth: &LabelVector) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(FmtcError::DimensionMismatch(format!(
                "label vectors differ in length: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(FmtcError::InvalidParameter(
                "label vectors are empty".into(),
            ));
        }
        let dense = |v: &LabelVector| {
            let ids: BTreeMap<usize, usize> = v
                .values()
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect();
            (
                ids.len(),
                v.values().iter().map(|l| ids[l]).collect::<Vec<_>>(),
            )
        };
        let (rows, a) = dense(pred);
        let (cols, b) = dense(truth);
        let mut table = vec![vec![0u64; cols]; rows];
        for (&i, &j) in a.iter().zip(&b) {
            table[i][j] += 1;
        }
        Ok(Contingency {
            table,
            n: pred.len() as u64,
        })
    }

    fn row_sums(&self) -> Vec<u64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let mut out = vec![0; self.table[0].len()];
        for r in &self.table {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

/// Minimum-cost perfect assignment on a square integer matrix
/// (shortest augmenting paths with potentials). Returns the column of each row.
fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Fraction of samples matched under the best one-to-one mapping between
/// predicted clusters and true classes.
pub fn accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    let ct = Contingency::new(pred, truth)?;
    let size = ct.table.len().max(ct.table[0].len());
    let mut cost = vec![vec![0i64; size]; size];
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i][j] = -(c as i64);
        }
    }
    let assign = hungarian(&cost);
    let matched: i64 = assign.iter().enumerate().map(|(i, &j)| -cost[i][j]).sum();
    Ok(matched as f64 / ct.n as f64)
}

/// Entropy in nats of a partition given its block sizes. Sizes are sorted
/// first so equal multisets give bit-identical results.
fn entropy(counts: &[u64], n: u64) -> f64 {
    let mut sorted: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    sorted.sort_unstable();
    let n = n as f64;
    let s: f64 = sorted.iter().map(|&c| c as f64 * (c as f64).ln()).sum();
    (n.ln() - s / n).max(0.0)
}

/// Mutual information normalized by the geometric mean of the two entropies.
/// Two single-cluster partitions score 1; exactly one single-cluster side
/// scores 0.
pub fn nmi(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    let ct = Contingency::new(pred, truth)?;
    let ha = entropy(&ct.row_sums(), ct.n);
    let hb = entropy(&ct.col_sums(), ct.n);
    match (ha == 0.0, hb == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let joint: Vec<u64> = ct.table.iter().flatten().copied().collect();
    let hab = entropy(&joint, ct.n);
    let mi = (ha - hab) + hb;
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> u128 {
    let c = c as u128;
    c * c.saturating_sub(1) / 2
}

/// Fraction of sample pairs on which the two partitions agree (both
/// together or both apart), from contingency pair counts.
pub fn rand_index(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    if pred.len() < 2 || truth.len() < 2 {
        return Err(FmtcError::InvalidParameter(
            "rand index needs at least two samples".into(),
        ));
    }
    let ct = Contingency::new(pred, truth)?;
    let total = pairs(ct.n);
    let same_both: u128 = ct.table.iter().flatten().map(|&c| pairs(c)).sum();
    let same_pred: u128 = ct.row_sums().into_iter().map(pairs).sum();
    let same_truth: u128 = ct.col_sums().into_iter().map(pairs).sum();
    let agree = total + 2 * same_both - same_pred - same_truth;
    Ok(agree as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[usize]) -> LabelVector {
        LabelVector::new(v.to_vec())
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        let k = pred.iter().chain(truth).max().unwrap() + 1;
        let best = permutations(k)
            .into_iter()
            .map(|perm| {
                pred.iter()
                    .zip(truth)
                    .filter(|&(&p, &t)| perm[p] == t)
                    .count()
            })
            .max()
            .unwrap();
        best as f64 / pred.len() as f64
    }

    fn enumerated_rand(pred: &[usize], truth: &[usize]) -> f64 {
        let n = pred.len();
        let mut agree = 0u64;
        let mut total = 0u64;
        for i in 0..n {
            for j in i + 1..n {
                total += 1;
                if (pred[i] == pred[j]) == (truth[i] == truth[j]) {
                    agree += 1;
                }
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn accuracy_examples() {
        let t = lv(&[0, 0, 1, 1, 2, 2, 2]);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(accuracy(&lv(&[5, 5, 0, 0, 9, 9, 9]), &t).unwrap(), 1.0);
        let got = accuracy(&lv(&[0, 0, 1, 1, 2, 2]), &lv(&[1, 1, 1, 0, 0, 2])).unwrap();
        assert_eq!(got, 4.0 / 6.0);
        assert_eq!(
            got,
            brute_accuracy(&[0, 0, 1, 1, 2, 2], &[1, 1, 1, 0, 0, 2])
        );
    }

    #[test]
    fn accuracy_errors() {
        assert!(accuracy(&lv(&[0, 1]), &lv(&[0])).is_err());
        assert!(accuracy(&lv(&[]), &lv(&[])).is_err());
    }

    #[test]
    fn accuracy_with_unequal_cluster_counts() {
        // three predicted clusters against two classes
        let got = accuracy(&lv(&[0, 0, 1, 1, 2, 2]), &lv(&[0, 0, 0, 1, 1, 1])).unwrap();
        assert_eq!(
            got,
            brute_accuracy(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1])
        );
        assert_eq!(got, 4.0 / 6.0);
    }

    #[test]
    fn nmi_examples() {
        let t = lv(&[0, 0, 1, 1, 2]);
        assert_eq!(nmi(&t, &t).unwrap(), 1.0);
        assert_eq!(nmi(&lv(&[4, 4, 7, 7, 1]), &t).unwrap(), 1.0);
        assert_eq!(nmi(&lv(&[0, 1, 0, 1]), &lv(&[3, 3, 3, 3])).unwrap(), 0.0);
        assert_eq!(nmi(&lv(&[2, 2, 2]), &lv(&[0, 0, 0])).unwrap(), 1.0);
        assert!(nmi(&lv(&[0, 0, 1, 1]), &lv(&[0, 1, 0, 1])).unwrap().abs() < 1e-15);
        assert!(nmi(&lv(&[0, 1]), &lv(&[0])).is_err());
    }

    #[test]
    fn nmi_against_direct_formula() {
        let a = [0usize, 0, 1, 1, 1, 2, 2, 0, 1];
        let b = [1usize, 0, 1, 1, 0, 2, 2, 2, 1];
        let n = a.len() as f64;
        let mut joint = BTreeMap::new();
        let mut pa = BTreeMap::new();
        let mut pb = BTreeMap::new();
        for (&x, &y) in a.iter().zip(&b) {
            *joint.entry((x, y)).or_insert(0.0) += 1.0 / n;
            *pa.entry(x).or_insert(0.0) += 1.0 / n;
            *pb.entry(y).or_insert(0.0) += 1.0 / n;
        }
        let mi: f64 = joint
            .iter()
            .map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln())
            .sum();
        let h = |m: &BTreeMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
        let oracle = mi / (h(&pa) * h(&pb)).sqrt();
        assert!((nmi(&lv(&a), &lv(&b)).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rand_examples() {
        let t = lv(&[0, 1, 1, 2]);
        assert_eq!(rand_index(&t, &t).unwrap(), 1.0);
        assert_eq!(
            rand_index(&lv(&[0, 0, 0, 0]), &lv(&[0, 1, 2, 3])).unwrap(),
            0.0
        );
        // agreeing pairs: (0,1), (0,3), (1,3)
        assert_eq!(
            rand_index(&lv(&[0, 0, 1, 1]), &lv(&[0, 0, 0, 1])).unwrap(),
            3.0 / 6.0
        );
        assert_eq!(enumerated_rand(&[0, 0, 1, 1], &[0, 0, 0, 1]), 3.0 / 6.0);
        assert!(rand_index(&lv(&[0]), &lv(&[0])).is_err());
    }

    fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0..k, n)
    }

    proptest! {
        #[test]
        fn accuracy_matches_brute_force(
            (a, b) in (1usize..40).prop_flat_map(|n| (labels(n, 6), labels(n, 6)))
        ) {
            prop_assert_eq!(accuracy(&lv(&a), &lv(&b)).unwrap(), brute_accuracy(&a, &b));
        }

        #[test]
        fn rand_matches_enumeration(
            (a, b) in (2usize..=50).prop_flat_map(|n| (labels(n, 5), labels(n, 5)))
        ) {
            prop_assert_eq!(rand_index(&lv(&a), &lv(&b)).unwrap(), enumerated_rand(&a, &b));
        }

        #[test]
        fn scores_ignore_renaming(
            (a, b) in (2usize..30).prop_flat_map(|n| (labels(n, 4), labels(n, 4))),
            shift in 1usize..10,
        ) {
            // reverse the label order and offset the names
            let renamed: Vec<usize> = a.iter().map(|&l| 100 - 7 * l + shift).collect();
            let (x, y, r) = (lv(&a), lv(&b), lv(&renamed));
            prop_assert_eq!(accuracy(&x, &y).unwrap(), accuracy(&r, &y).unwrap());
            prop_assert_eq!(rand_index(&x, &y).unwrap(), rand_index(&r, &y).unwrap());
            prop_assert!((nmi(&x, &y).unwrap() - nmi(&r, &y).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&x, &y).unwrap() - nmi(&y, &x).unwrap()).abs() < 1e-12);
            let v = nmi(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

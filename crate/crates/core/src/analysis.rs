//! Post-hoc interpretation of a fitted model: task correlations, average
//! linkage clustering of tasks and ranked risk factors.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::FittedModel;

/// `R[a][b] = Ω[a][b] / √(Ω[a][a] Ω[b][b])`, unit diagonal, clamped to `[-1, 1]`.
pub fn cov_to_corr(omega: &SymMatrix) -> Result<SymMatrix> {
    let k = omega.dim();
    let mut sd = Vec::with_capacity(k);
    for i in 0..k {
        let v = omega[(i, i)];
        if !(v > 0.0) {
            return Err(Error::DegenerateDiagonal { index: i, value: v });
        }
        sd.push(v.sqrt());
    }
    let r = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else {
            (omega[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
        }
    });
    SymMatrix::new(r)
}

/// One agglomeration step. Clusters are numbered like scipy: leaves are
/// `0..K`, the cluster formed by merge `i` is `K + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_names: Vec<String>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.leaf_names.len()
    }

    /// Merge list as `step<TAB>a<TAB>b<TAB>height` lines with a header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("step\tcluster_a\tcluster_b\theight\n");
        for (i, m) in self.merges.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}\t{:.6}", self.label(m.a), self.label(m.b), m.height);
        }
        out
    }

    fn label(&self, id: usize) -> String {
        match self.leaf_names.get(id) {
            Some(name) => name.clone(),
            None => format!("#{id}"),
        }
    }
}

/// Average-linkage agglomerative clustering on `d = 1 − r`.
///
/// Among equally close pairs the one whose smallest member leaves are
/// lexicographically lowest is merged first.
pub fn hcluster(r: &SymMatrix, leaf_names: &[String]) -> Dendrogram {
    let k = r.dim();
    // active clusters: (id, leaves sorted)
    let mut active: Vec<(usize, Vec<usize>)> = (0..k).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(k.saturating_sub(1));
    let dist = |a: &[usize], b: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += 1.0 - r[(i, j)];
            }
        }
        s / (a.len() * b.len()) as f64
    };
    while active.len() > 1 {
        let mut best: Option<(f64, (usize, usize), (usize, usize))> = None;
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                let d = dist(&active[x].1, &active[y].1);
                let (lx, ly) = (active[x].1[0], active[y].1[0]);
                let key = (lx.min(ly), lx.max(ly));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _)) => d < bd || (d == bd && key < bkey),
                };
                if better {
                    best = Some((d, key, (x, y)));
                }
            }
        }
        let (height, _, (x, y)) = best.expect("at least two clusters");
        let (id_y, leaves_y) = active.remove(y);
        let (id_x, leaves_x) = active.remove(x);
        let (first, second) = if leaves_x[0] <= leaves_y[0] {
            (id_x, id_y)
        } else {
            (id_y, id_x)
        };
        merges.push(Merge {
            a: first,
            b: second,
            height,
        });
        let mut leaves = leaves_x;
        leaves.extend(leaves_y);
        leaves.sort_unstable();
        active.push((k + merges.len() - 1, leaves));
    }
    Dendrogram {
        merges,
        leaf_names: leaf_names.to_vec(),
    }
}

/// Cluster labels after undoing the last `n_clusters − 1` merges. Labels are
/// numbered in order of each cluster's lowest leaf.
pub fn cut(d: &Dendrogram, n_clusters: usize) -> Result<Vec<usize>> {
    let k = d.n_leaves();
    if n_clusters < 1 || n_clusters > k {
        return Err(Error::BadClusterCount {
            requested: n_clusters,
            leaves: k,
        });
    }
    // union-find over leaves + internal nodes
    let mut parent: Vec<usize> = (0..k + d.merges.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, m) in d.merges.iter().take(k - n_clusters).enumerate() {
        let node = k + i;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = node;
        parent[rb] = node;
    }
    let mut labels = vec![usize::MAX; k];
    let mut seen: Vec<usize> = Vec::new();
    for leaf in 0..k {
        let root = find(&mut parent, leaf);
        let label = match seen.iter().position(|&r| r == root) {
            Some(p) => p,
            None => {
                seen.push(root);
                seen.len() - 1
            }
        };
        labels[leaf] = label;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankBy {
    /// Highest coefficient first.
    #[default]
    Value,
    /// Largest absolute coefficient first.
    Magnitude,
}

/// Top coefficients of task column `task`, ties broken by feature index.
pub fn top_k_factors(model: &FittedModel, task: usize, top: usize, rank_by: RankBy) -> Vec<(String, f64)> {
    let col: Vec<f64> = model.beta.column(task).iter().copied().collect();
    top_k_indices(&col, top, rank_by)
        .into_iter()
        .map(|j| (model.feature_names[j].clone(), col[j]))
        .collect()
}

pub fn top_k_indices(values: &[f64], top: usize, rank_by: RankBy) -> Vec<usize> {
    let key = |v: f64| match rank_by {
        RankBy::Value => v,
        RankBy::Magnitude => v.abs(),
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| key(values[b]).total_cmp(&key(values[a])).then(a.cmp(&b)));
    idx.truncate(top.min(values.len()));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("t{i}")).collect()
    }

    fn block_corr(k: usize, within: f64, across: f64, block: impl Fn(usize) -> usize) -> SymMatrix {
        SymMatrix::new(DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                1.0
            } else if block(a) == block(b) {
                within
            } else {
                across
            }
        }))
        .unwrap()
    }

    #[test]
    fn corr_examples() {
        let d = cov_to_corr(&SymMatrix::from_diagonal(&[2.0, 5.0, 0.3]).unwrap()).unwrap();
        assert_eq!(d, SymMatrix::identity(3));
        let r = cov_to_corr(&SymMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 4.0])).unwrap()).unwrap();
        assert_eq!(r[(0, 1)], 0.5);
        assert!(matches!(
            cov_to_corr(&SymMatrix::from_diagonal(&[1.0, 0.0]).unwrap()),
            Err(Error::DegenerateDiagonal { index: 1, .. })
        ));
    }

    #[test]
    fn corr_of_random_spd_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let r = cov_to_corr(&SymMatrix::new(&b * b.transpose() + DMatrix::identity(5, 5) * 0.01).unwrap()).unwrap();
        assert!((0..5).all(|i| r[(i, i)] == 1.0));
        assert!(r.eigenvalues()[0] >= -1e-10);
    }

    #[test]
    fn small_dendrograms() {
        let d = hcluster(&SymMatrix::identity(1), &names(1));
        assert!(d.merges.is_empty());
        let r = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0])).unwrap();
        let d = hcluster(&r, &names(2));
        assert_eq!(d.merges.len(), 1);
        assert!((d.merges[0].height - 0.7).abs() < 1e-15);
    }

    #[test]
    fn block_structure_is_recovered() {
        let truth = |i: usize| usize::from(i % 2 == 1);
        let r = block_corr(6, 0.9, 0.1, truth);
        let d = hcluster(&r, &names(6));
        assert_eq!(d.merges.len(), 5);
        assert!(d.merges.windows(2).all(|w| w[0].height <= w[1].height));
        let labels = cut(&d, 2).unwrap();
        assert_eq!(labels, (0..6).map(truth).collect::<Vec<_>>());
        assert_eq!(cut(&d, 1).unwrap(), vec![0; 6]);
        assert_eq!(cut(&d, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(matches!(cut(&d, 0), Err(Error::BadClusterCount { .. })));
        assert!(cut(&d, 7).is_err());
    }

    #[test]
    fn consecutive_cuts_differ_by_one_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = DMatrix::from_fn(7, 7, |_, _| rng.random_range(-1.0..1.0));
        let r = cov_to_corr(&SymMatrix::new(&b * b.transpose()).unwrap()).unwrap();
        let d = hcluster(&r, &names(7));
        for n in 1..7 {
            let coarse = cut(&d, n).unwrap();
            let fine = cut(&d, n + 1).unwrap();
            // each fine cluster lies inside one coarse cluster
            for c in 0..=n {
                let parents: std::collections::BTreeSet<_> =
                    (0..7).filter(|&i| fine[i] == c).map(|i| coarse[i]).collect();
                assert_eq!(parents.len(), 1);
            }
            let split = (0..n)
                .filter(|&c| {
                    let kids: std::collections::BTreeSet<_> =
                        (0..7).filter(|&i| coarse[i] == c).map(|i| fine[i]).collect();
                    kids.len() == 2
                })
                .count();
            assert_eq!(split, 1);
        }
    }

    #[test]
    fn clustering_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let r = cov_to_corr(&SymMatrix::new(&b * b.transpose()).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let rp = SymMatrix::new(DMatrix::from_fn(6, 6, |a, c| r[(perm[a], perm[c])])).unwrap();
        let d = hcluster(&r, &names(6));
        let dp = hcluster(&rp, &names(6));
        let h: Vec<f64> = d.merges.iter().map(|m| m.height).collect();
        let hp: Vec<f64> = dp.merges.iter().map(|m| m.height).collect();
        for (x, y) in h.iter().zip(&hp) {
            assert!((x - y).abs() < 1e-12);
        }
        for n in 1..=6 {
            let a = cut(&d, n).unwrap();
            let bp = cut(&dp, n).unwrap();
            // same partition after relabelling leaves
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(bp[i] == bp[j], a[perm[i]] == a[perm[j]]);
                }
            }
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 2, RankBy::Value), vec![0, 2]);
        assert_eq!(top_k_indices(&[0.0; 5], 3, RankBy::Value), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[1.0, -5.0, 2.0], 1, RankBy::Magnitude), vec![1]);
        assert_eq!(top_k_indices(&[1.0], 4, RankBy::Value), vec![0]);
    }

    #[test]
    fn top_k_is_sorted_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut full: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        full.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<usize> = full.iter().take(7).map(|p| p.1).collect();
        assert_eq!(top_k_indices(&v, 7, RankBy::Value), want);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn corr_scale_invariant(seed in 0u64..5000, d in proptest::collection::vec(0.1f64..10.0, 4)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
                let om = SymMatrix::new(&b * b.transpose() + DMatrix::identity(4, 4) * 0.1).unwrap();
                let dm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d));
                let scaled = SymMatrix::new(&dm * om.matrix() * &dm).unwrap();
                let a = cov_to_corr(&om).unwrap();
                let c = cov_to_corr(&scaled).unwrap();
                prop_assert!((a.matrix() - c.matrix()).amax() < 1e-12);
            }
        }
    }
}

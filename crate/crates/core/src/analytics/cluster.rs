//! Ward-linkage agglomerative clustering and dendrogram cuts.
//!
//! Node ids follow the usual convention: leaves are `0..n`, the cluster made by
//! merge `i` gets id `n + i`. Distances are Ward linkage distances,
//! `sqrt(2·|A||B|/(|A|+|B|))·‖c_A − c_B‖`, maintained with the Lance–Williams
//! update on squared distances.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl ClusterTree {
    /// One merge per line: `left right distance size`.
    pub fn to_merge_list(&self) -> String {
        let mut out = String::new();
        for m in &self.merges {
            writeln!(out, "{} {} {} {}", m.left, m.right, m.distance, m.size).unwrap();
        }
        out
    }

    pub fn from_merge_list(n_leaves: usize, text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("merge list line {}: `{line}`", i + 1));
            if parts.len() != 4 {
                return Err(bad());
            }
            merges.push(Merge {
                left: parts[0].parse().map_err(|_| bad())?,
                right: parts[1].parse().map_err(|_| bad())?,
                distance: parts[2].parse().map_err(|_| bad())?,
                size: parts[3].parse().map_err(|_| bad())?,
            });
        }
        if merges.len() != n_leaves.saturating_sub(1) {
            return Err(Error::Parse(format!("expected {} merges, found {}", n_leaves.saturating_sub(1), merges.len())));
        }
        Ok(ClusterTree { n_leaves, merges })
    }
}

/// Total order on candidate merges: distance, then (low id, high id).
fn better(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

fn key(d2: f64, a: usize, b: usize) -> (f64, usize, usize) {
    (d2, a.min(b), a.max(b))
}

/// Agglomerative clustering of the rows of `points` under Ward's criterion.
///
/// Ties are broken by the smallest `(left_id, right_id)` pair. Each active
/// cluster caches its best partner, which keeps the typical cost near O(n²).
pub fn ward_cluster(points: &DMatrix<f64>) -> ClusterTree {
    let n = points.nrows();
    if n <= 1 {
        return ClusterTree { n_leaves: n, merges: Vec::new() };
    }

    // squared distances indexed by slot; a merged cluster reuses its left slot
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (points.row(i) - points.row(j)).norm_squared();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let mut node_id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut nn: Vec<(f64, usize, usize)> = vec![(f64::INFINITY, usize::MAX, usize::MAX); n];
    let mut nn_slot = vec![usize::MAX; n];

    let refresh = |slot: usize,
                   d2: &[f64],
                   active: &[bool],
                   node_id: &[usize],
                   nn: &mut [(f64, usize, usize)],
                   nn_slot: &mut [usize]| {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        let mut best_slot = usize::MAX;
        for other in 0..n {
            if other == slot || !active[other] {
                continue;
            }
            let cand = key(d2[slot * n + other], node_id[slot], node_id[other]);
            if better(cand, best) {
                best = cand;
                best_slot = other;
            }
        }
        nn[slot] = best;
        nn_slot[slot] = best_slot;
    };

    for slot in 0..n {
        refresh(slot, &d2, &active, &node_id, &mut nn, &mut nn_slot);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..(n - 1) {
        let mut a = usize::MAX;
        for slot in 0..n {
            if active[slot] && (a == usize::MAX || better(nn[slot], nn[a])) {
                a = slot;
            }
        }
        let b = nn_slot[a];
        let (dist2, low, high) = nn[a];
        let (na, nb) = (size[a], size[b]);
        merges.push(Merge { left: low, right: high, distance: dist2.max(0.0).sqrt(), size: na + nb });

        // Lance–Williams update into slot a
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let t = (na + nb) as f64 + nk;
            let v = ((na as f64 + nk) * d2[a * n + k] + (nb as f64 + nk) * d2[b * n + k] - nk * dist2) / t;
            d2[a * n + k] = v;
            d2[k * n + a] = v;
        }
        active[b] = false;
        size[a] = na + nb;
        node_id[a] = n + step;

        refresh(a, &d2, &active, &node_id, &mut nn, &mut nn_slot);
        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            if nn_slot[k] == a || nn_slot[k] == b {
                refresh(k, &d2, &active, &node_id, &mut nn, &mut nn_slot);
            } else {
                let cand = key(d2[k * n + a], node_id[k], node_id[a]);
                if better(cand, nn[k]) {
                    nn[k] = cand;
                    nn_slot[k] = a;
                }
            }
        }
    }
    ClusterTree { n_leaves: n, merges }
}

/// Flat clustering with `k` clusters: undoes the last `k − 1` merges.
///
/// Labels `0..k` are assigned in order of first appearance by leaf index.
pub fn cut_tree(tree: &ClusterTree, k: usize) -> Result<Vec<usize>> {
    let n = tree.n_leaves;
    if k == 0 || k > n {
        return Err(Error::BadK { k, n });
    }
    let mut parent: Vec<usize> = (0..(2 * n).max(1)).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, m) in tree.merges.iter().take(n - k).enumerate() {
        let new = n + i;
        let l = find(&mut parent, m.left);
        let r = find(&mut parent, m.right);
        parent[l] = new;
        parent[r] = new;
    }
    let mut label_of_root = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(n);
    for leaf in 0..n {
        let root = find(&mut parent, leaf);
        let next = label_of_root.len();
        labels.push(*label_of_root.entry(root).or_insert(next));
    }
    Ok(labels)
}
